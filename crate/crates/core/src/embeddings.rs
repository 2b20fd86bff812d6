//! Fixed label embeddings (the semantic space fed to the semantic branch).
//!
//! Embeddings are produced offline by a phrase encoder and consumed here from a
//! JSON object mapping label to vector. Rows are aligned with the vocabulary.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::Value;

use crate::annotations::ClassVocabulary;
use crate::numcore::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum EmbeddingError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("label `{0}` has no embedding")]
    MissingLabel(String),
    #[error("label `{label}` has width {width}, expected {expected}")]
    InconsistentWidth {
        label: String,
        width: usize,
        expected: usize,
    },
    #[error("label `{0}` has a non-finite or non-numeric entry")]
    NonFinite(String),
    #[error("label `{0}` has an all-zero embedding")]
    ZeroRow(String),
    #[error("embedding width must be at least 2, got {0}")]
    WidthTooSmall(usize),
    #[error("affinity pair ({0}, {1}) is outside the vocabulary")]
    BadPair(usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Provenance {
    File(String),
    Synthetic { seed: u64 },
}

/// `N x D_e` label embedding matrix, row `i` for class `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticSpace {
    matrix: Tensor,
    provenance: Provenance,
}

impl SemanticSpace {
    pub fn from_matrix(matrix: Tensor, provenance: Provenance) -> Self {
        assert_eq!(matrix.rank(), 2, "semantic space must be a matrix");
        SemanticSpace { matrix, provenance }
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn num_classes(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.matrix.shape()[1]
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    /// Copy with every row scaled to unit Euclidean norm.
    pub fn normalized(&self) -> SemanticSpace {
        let d = self.width();
        let mut m = self.matrix.clone();
        for row in m.data_mut().chunks_mut(d) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|v| *v /= norm);
            }
        }
        SemanticSpace {
            matrix: m,
            provenance: self.provenance.clone(),
        }
    }

    /// Serializes as a JSON object keyed by label.
    pub fn to_json(&self, vocab: &ClassVocabulary) -> String {
        let mut map = serde_json::Map::new();
        for (i, label) in vocab.labels().iter().enumerate() {
            map.insert(label.clone(), Value::from(self.matrix.row(i).to_vec()));
        }
        serde_json::to_string(&Value::Object(map)).expect("finite numbers serialize")
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Loads embeddings for every vocabulary label; extra labels in the file are ignored.
pub fn load_semantic_space(path: impl AsRef<Path>, vocab: &ClassVocabulary) -> Result<SemanticSpace, EmbeddingError> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|source| EmbeddingError::Io {
        path: shown.clone(),
        source,
    })?;
    let parsed: Value = serde_json::from_str(&text).map_err(|e| EmbeddingError::Parse {
        path: shown.clone(),
        message: e.to_string(),
    })?;
    let Value::Object(map) = parsed else {
        return Err(EmbeddingError::Parse {
            path: shown,
            message: "expected a JSON object mapping label to vector".into(),
        });
    };
    let mut width = None;
    let mut data = Vec::new();
    for label in vocab.labels() {
        let entry = map.get(label).ok_or_else(|| EmbeddingError::MissingLabel(label.clone()))?;
        let Value::Array(values) = entry else {
            return Err(EmbeddingError::NonFinite(label.clone()));
        };
        let expected = *width.get_or_insert(values.len());
        if values.len() != expected {
            return Err(EmbeddingError::InconsistentWidth {
                label: label.clone(),
                width: values.len(),
                expected,
            });
        }
        let row: Vec<f64> = values
            .iter()
            .map(|v| v.as_f64().filter(|x| x.is_finite()))
            .collect::<Option<_>>()
            .ok_or_else(|| EmbeddingError::NonFinite(label.clone()))?;
        if row.iter().all(|&v| v == 0.0) {
            return Err(EmbeddingError::ZeroRow(label.clone()));
        }
        data.extend(row);
    }
    let width = width.unwrap_or(0);
    Ok(SemanticSpace {
        matrix: Tensor::new(vec![vocab.len(), width], data).expect("rows x width"),
        provenance: Provenance::File(shown),
    })
}

/// Seeded Gaussian embeddings. Each affinity pair shares an extra Gaussian
/// component, so paired rows have expected cosine around one half while
/// unrelated rows are near orthogonal.
pub fn synthetic_semantic_space(
    vocab: &ClassVocabulary,
    width: usize,
    seed: u64,
    affinity: &[(usize, usize)],
) -> Result<SemanticSpace, EmbeddingError> {
    if width < 2 {
        return Err(EmbeddingError::WidthTooSmall(width));
    }
    let n = vocab.len();
    if let Some(&(i, j)) = affinity.iter().find(|&&(i, j)| i >= n || j >= n) {
        return Err(EmbeddingError::BadPair(i, j));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data: Vec<f64> = (0..n * width).map(|_| StandardNormal.sample(&mut rng)).collect();
    for &(i, j) in affinity {
        for d in 0..width {
            let shared: f64 = StandardNormal.sample(&mut rng);
            data[i * width + d] += shared;
            data[j * width + d] += shared;
        }
    }
    Ok(SemanticSpace {
        matrix: Tensor::new(vec![n, width], data).expect("n x width"),
        provenance: Provenance::Synthetic { seed },
    })
}
