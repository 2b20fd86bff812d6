//! The four subcommands as library calls.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::Context;
use cornet_core::annotations::{build_cooccurrence, load_annotations, AnnotationError, CoOccurrenceMatrix};
use cornet_core::embeddings::load_semantic_space;
use cornet_core::metrics::EvalReport;
use cornet_core::synth::{generate_dataset, load_corpus, write_corpus, Corpus, Manifest, SynthError, SynthSpec};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::train::{checkpoint_path, evaluate, train_to_dir, TrainOutcome};
use crate::CliError;

fn corpus_error(e: SynthError) -> CliError {
    match e {
        SynthError::InvalidSpec(_) => CliError::Usage(e.to_string()),
        other => CliError::Runtime(other.into()),
    }
}

fn annotation_error(e: AnnotationError) -> CliError {
    match e {
        AnnotationError::Parse { .. } | AnnotationError::Vocabulary(_) => CliError::Usage(e.to_string()),
        other => CliError::Runtime(other.into()),
    }
}

pub fn read_spec(path: &Path) -> Result<SynthSpec, CliError> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

/// Generates the corpus described by the spec file and writes it to `out`.
pub fn synth(spec_path: &Path, out: &Path) -> Result<Manifest, CliError> {
    let spec = read_spec(spec_path)?;
    let corpus = generate_dataset(&spec).map_err(corpus_error)?;
    write_corpus(out, &corpus).map_err(corpus_error)
}

/// Loads the corpus a run config points at, with any embedding override applied.
pub fn load_run_corpus(config: &RunConfig) -> Result<Corpus, CliError> {
    let mut corpus = load_corpus(&config.data).map_err(corpus_error)?;
    if let Some(path) = &config.embeddings {
        corpus.semantic = load_semantic_space(path, &corpus.vocab).map_err(anyhow::Error::from)?;
    }
    Ok(corpus)
}

pub struct TrainResult {
    pub outcome: TrainOutcome,
    pub best_checkpoint: Option<PathBuf>,
}

pub fn train(config_path: &Path, out: &Path) -> Result<TrainResult, CliError> {
    let config = RunConfig::load(config_path)?;
    config.validate()?;
    let corpus = load_run_corpus(&config)?;
    let outcome = train_to_dir(&config, &corpus, out)?;
    let best_checkpoint = outcome.best_epoch.map(|e| checkpoint_path(out, e));
    Ok(TrainResult {
        outcome,
        best_checkpoint,
    })
}

/// Scores the validation split of `data` with the prediction branch of a checkpoint.
pub fn eval(checkpoint: &Path, data: &Path, report: &Path) -> Result<EvalReport, CliError> {
    let ckpt = Checkpoint::load(checkpoint).map_err(|e| CliError::Usage(e.to_string()))?;
    let params = ckpt.params().map_err(anyhow::Error::from)?;
    let corpus = load_corpus(data).map_err(corpus_error)?;
    let network = &ckpt.network;
    let width = corpus.feature_dim();
    if width != network.encoder.d_in {
        return Err(anyhow::anyhow!(
            "tensor `encoder.layer0.kernel` expects {}-wide features, {} has {width}",
            network.encoder.d_in,
            data.display()
        )
        .into());
    }
    if corpus.vocab.len() != network.num_classes() {
        return Err(anyhow::anyhow!(
            "tensor `head.weight` has {} class columns, {} has {} classes",
            network.num_classes(),
            data.display(),
            corpus.vocab.len()
        )
        .into());
    }
    if corpus.val.is_empty() {
        return Err(anyhow::anyhow!("{} has no validation videos", data.display()).into());
    }
    let mut result = evaluate(&params, network, &corpus, &corpus.val)?.map_err(anyhow::Error::from)?;
    result.seed = ckpt.seed;
    result.config_digest = ckpt.config_digest.clone();
    let text = serde_json::to_string_pretty(&result).expect("report serializes");
    fs::write(report, text + "\n").with_context(|| format!("writing {}", report.display()))?;
    Ok(result)
}

/// Corpus-level ground truth: the sum of every video's co-occurrence matrix.
pub fn cooc(annotations: &Path, vocab: &Path, out: &Path) -> Result<CoOccurrenceMatrix, CliError> {
    let (seqs, vocab) = load_annotations(annotations, vocab).map_err(annotation_error)?;
    if seqs.is_empty() {
        return Err(annotation_error(AnnotationError::Empty));
    }
    let mut total = CoOccurrenceMatrix::zeros(vocab.len());
    for seq in &seqs {
        total = total
            .add(&build_cooccurrence(seq, &vocab).map_err(annotation_error)?)
            .map_err(annotation_error)?;
    }
    let file = fs::File::create(out).with_context(|| format!("creating {}", out.display()))?;
    total
        .write_csv(&vocab, BufWriter::new(file))
        .map_err(annotation_error)?;
    Ok(total)
}
