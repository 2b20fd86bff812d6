//! Training loop and per-split evaluation.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use cornet_core::annotations::{build_cooccurrence, to_dense_targets};
use cornet_core::metrics::{per_frame_map, EvalReport, MetricsError};
use cornet_core::numcore::{optimizer_step, AdamConfig, OptimizerState};
use cornet_core::seqmodel::{
    cor_network_forward, objective_node, Mode, NetworkConfig, NetworkNodes, NetworkParams, WindowTargets,
};
use cornet_core::synth::{Corpus, Video};
use cornet_core::{Graph, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::CliError;

pub const LOG_HEADER: [&str; 5] = ["epoch", "bce", "mse", "total", "val_map"];

/// Mean losses over the epoch's training windows and the validation mAP after it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub bce: f64,
    pub mse: f64,
    pub total: f64,
    /// `None` when the validation split is empty or has no positive frame.
    pub val_map: Option<f64>,
}

impl EpochRecord {
    fn csv_row(&self) -> [String; 5] {
        [
            self.epoch.to_string(),
            self.bce.to_string(),
            self.mse.to_string(),
            self.total.to_string(),
            self.val_map.map_or_else(|| "nan".into(), |m| m.to_string()),
        ]
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub network: NetworkConfig,
    pub params: NetworkParams,
    pub optimizer: OptimizerState,
    pub records: Vec<EpochRecord>,
    /// Epoch with the highest validation mAP (earliest on ties).
    pub best_epoch: Option<usize>,
}

/// Training window cut from one video: features and targets padded to `crop_len`.
struct Window {
    features: Tensor,
    targets: Tensor,
    cooc: Tensor,
    valid: usize,
}

fn cut_window(video: &Video, corpus: &Corpus, crop_len: usize, rng: &mut ChaCha8Rng) -> anyhow::Result<Window> {
    let frames = video.annotation.num_frames;
    let start = if frames > crop_len { rng.random_range(0..=frames - crop_len) } else { 0 };
    let valid = frames.min(crop_len);
    let seq = video.annotation.window(start, valid);
    let n = corpus.vocab.len();
    let d = video.features.cols();

    let mut features = Tensor::zeros(&[crop_len, d]);
    features.data_mut()[..valid * d].copy_from_slice(&video.features.data()[start * d..(start + valid) * d]);
    let dense = to_dense_targets(&seq, &corpus.vocab)?;
    let mut targets = Tensor::zeros(&[crop_len, n]);
    targets.data_mut()[..valid * n].copy_from_slice(dense.data());
    let cooc = build_cooccurrence(&seq, &corpus.vocab)?.into_tensor();
    Ok(Window {
        features,
        targets,
        cooc,
        valid,
    })
}

/// Runs the prediction branch alone over `videos` and scores pooled frames.
pub fn evaluate(
    params: &NetworkParams,
    network: &NetworkConfig,
    corpus: &Corpus,
    videos: &[Video],
) -> anyhow::Result<Result<EvalReport, MetricsError>> {
    let n = corpus.vocab.len();
    let mut probs = Vec::new();
    let mut targets = Vec::new();
    for video in videos {
        let (p, _) = cor_network_forward(&video.features, None, params, network, Mode::Infer)
            .with_context(|| format!("video `{}`", video.annotation.id))?;
        probs.extend_from_slice(p.data());
        targets.extend_from_slice(to_dense_targets(&video.annotation, &corpus.vocab)?.data());
    }
    let frames = probs.len() / n.max(1);
    let probs = Tensor::new(vec![frames, n], probs)?;
    let targets = Tensor::new(vec![frames, n], targets)?;
    Ok(per_frame_map(&probs, &targets, &corpus.vocab))
}

/// Trains on `corpus.train`, scoring `corpus.val` after every epoch. `on_epoch`
/// sees each record together with the parameters and optimizer state it ends with.
pub fn train(
    config: &RunConfig,
    corpus: &Corpus,
    mut on_epoch: impl FnMut(&EpochRecord, &NetworkParams, &OptimizerState) -> anyhow::Result<()>,
) -> Result<TrainOutcome, CliError> {
    config.validate()?;
    let network = config.network(corpus)?;
    if corpus.train.is_empty() {
        return Err(CliError::Usage(format!("{} has no training videos", config.data.display())));
    }
    let mut params = NetworkParams::init(&network, &mut ChaCha8Rng::seed_from_u64(config.seed))
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let mut data_rng = ChaCha8Rng::seed_from_u64(config.seed);
    data_rng.set_stream(1);

    let flat = |p: &NetworkParams| p.named().into_iter().map(|(_, t)| t.clone()).collect::<Vec<_>>();
    let adam = AdamConfig {
        learning_rate: config.learning_rate,
        ..AdamConfig::default()
    };
    let mut optimizer = OptimizerState::new(adam, &flat(&params));
    let mut records = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64)> = None;
    let mut order: Vec<usize> = (0..corpus.train.len()).collect();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut data_rng);
        let mut sums = [0.0; 3];
        for batch in order.chunks(config.batch_size) {
            let mut accum: Option<Vec<Tensor>> = None;
            for &vi in batch {
                let window = cut_window(&corpus.train[vi], corpus, config.crop_len, &mut data_rng)?;
                let mut g = Graph::new();
                let nodes = NetworkNodes::register(&mut g, &params, &network, Mode::Train);
                let targets = WindowTargets {
                    targets: &window.targets,
                    cooc: &window.cooc,
                    valid_frames: window.valid,
                };
                let obj = objective_node(
                    &mut g,
                    &window.features,
                    &corpus.semantic,
                    &targets,
                    &nodes,
                    &network,
                    config.balance_factor,
                    config.normalize_cooc,
                )
                .map_err(|e| anyhow::anyhow!("video `{}`: {e}", corpus.train[vi].annotation.id))?;
                for (s, id) in sums.iter_mut().zip([obj.bce, obj.mse, obj.total]) {
                    *s += g.value(id).data()[0];
                }
                let grads = g.backward(obj.total).map_err(anyhow::Error::from)?;
                let ids = nodes.ordered();
                let acc = accum.get_or_insert_with(|| ids.iter().map(|&id| Tensor::zeros(g.value(id).shape())).collect());
                for (a, id) in acc.iter_mut().zip(&ids) {
                    // Frozen leaves have no gradient and keep a zero update.
                    if let Some(gr) = grads.get(*id) {
                        for (x, y) in a.data_mut().iter_mut().zip(gr.data()) {
                            *x += y;
                        }
                    }
                }
            }
            let mut grads = accum.expect("batches are non-empty");
            let scale = 1.0 / batch.len() as f64;
            for t in &mut grads {
                t.data_mut().iter_mut().for_each(|v| *v *= scale);
            }
            let (next, state) = optimizer_step(&flat(&params), &grads, &optimizer).map_err(anyhow::Error::from)?;
            for ((_, slot), value) in params.named_mut().into_iter().zip(next) {
                *slot = value;
            }
            optimizer = state;
        }

        let count = corpus.train.len() as f64;
        let val_map = if corpus.val.is_empty() {
            None
        } else {
            evaluate(&params, &network, corpus, &corpus.val)?.ok().map(|r| r.map)
        };
        let record = EpochRecord {
            epoch,
            bce: sums[0] / count,
            mse: sums[1] / count,
            total: sums[2] / count,
            val_map,
        };
        if let Some(m) = val_map {
            if best.is_none_or(|(_, b)| m > b) {
                best = Some((epoch, m));
            }
        }
        on_epoch(&record, &params, &optimizer)?;
        records.push(record);
    }
    Ok(TrainOutcome {
        network,
        params,
        optimizer,
        records,
        best_epoch: best.map(|(e, _)| e),
    })
}

pub fn checkpoint_path(out: &Path, epoch: usize) -> PathBuf {
    out.join("checkpoints").join(format!("epoch_{epoch:03}.json"))
}

/// Trains with file output: `log.csv` and one checkpoint per epoch under `out`.
pub fn train_to_dir(config: &RunConfig, corpus: &Corpus, out: &Path) -> Result<TrainOutcome, CliError> {
    config.validate()?;
    let network = config.network(corpus)?;
    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).with_context(|| format!("creating {}", ckpt_dir.display()))?;
    let log_path = out.join("log.csv");
    let mut log = csv::Writer::from_path(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    log.write_record(LOG_HEADER).context("writing log.csv")?;
    log.flush().context("writing log.csv")?;
    let digest = config.digest();
    let outcome = train(config, corpus, |record, params, optimizer| {
        log.write_record(record.csv_row())?;
        log.flush()?;
        let ckpt = Checkpoint::capture(&network, params, optimizer, record.epoch, config.seed, &digest);
        ckpt.save(&checkpoint_path(out, record.epoch))?;
        Ok(())
    })?;
    Ok(outcome)
}
