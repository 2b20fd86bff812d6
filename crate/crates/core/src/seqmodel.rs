//! Host sequence model and the composed network.
//!
//! The encoder is a stack of same-length temporal convolutions with rectifiers.
//! Its output feeds a per-frame affine+sigmoid prediction head and, during
//! training only, the co-occurrence relation module.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corm::{self, CormConfig, CormError, CormNodes, CormParams, Linear, LinearNodes};
use crate::embeddings::SemanticSpace;
use crate::metrics;
use crate::numcore::{Graph, NodeId, NumError, Tensor};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("config: {0}")]
    Config(String),
    #[error("encoder: {0}")]
    Encoder(NumError),
    #[error("prediction head: {0}")]
    Head(NumError),
    #[error("loss: {0}")]
    Loss(NumError),
    #[error("CORM {0}")]
    Corm(#[from] CormError),
    #[error(transparent)]
    Numeric(#[from] NumError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_in: usize,
    /// Output width `D0`.
    pub hidden: usize,
    pub layers: usize,
    /// Odd temporal kernel size.
    pub kernel: usize,
}

impl EncoderConfig {
    /// Three layers of width 64 with kernel 9.
    pub fn synthetic_default(d_in: usize) -> Self {
        EncoderConfig {
            d_in,
            hidden: 64,
            layers: 3,
            kernel: 9,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.layers == 0 {
            return Err(ModelError::Config("encoder needs at least one layer".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(ModelError::Config(format!("kernel size {} is not odd", self.kernel)));
        }
        if self.d_in == 0 || self.hidden == 0 {
            return Err(ModelError::Config("encoder widths must be at least 1".into()));
        }
        Ok(())
    }
}

/// Encoder and module configuration together.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub encoder: EncoderConfig,
    pub corm: CormConfig,
}

impl NetworkConfig {
    pub fn num_classes(&self) -> usize {
        self.corm.num_classes
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.encoder.validate()?;
        self.corm.validate()?;
        if self.corm.d0 != self.encoder.hidden {
            return Err(ModelError::Config(format!(
                "CORM input width {} differs from encoder width {}",
                self.corm.d0, self.encoder.hidden
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    /// `[k, c_in, c_out]`
    pub kernel: Tensor,
    pub bias: Tensor,
}

/// Encoder, head, and module parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    pub encoder: Vec<ConvLayer>,
    pub head: Linear,
    pub corm: CormParams,
}

impl NetworkParams {
    pub fn init<R: Rng>(config: &NetworkConfig, rng: &mut R) -> Result<Self, ModelError> {
        config.validate()?;
        let enc = &config.encoder;
        let encoder = (0..enc.layers)
            .map(|l| {
                let cin = if l == 0 { enc.d_in } else { enc.hidden };
                ConvLayer {
                    kernel: corm::uniform(rng, &[enc.kernel, cin, enc.hidden], enc.kernel * cin),
                    bias: Tensor::zeros(&[enc.hidden]),
                }
            })
            .collect();
        let head = Linear::init(rng, enc.hidden, config.num_classes(), true);
        let corm = CormParams::init(&config.corm, rng)?;
        Ok(NetworkParams { encoder, head, corm })
    }

    /// All tensors under stable dotted names, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.encoder.iter().enumerate() {
            out.push((format!("encoder.layer{i}.kernel"), &layer.kernel));
            out.push((format!("encoder.layer{i}.bias"), &layer.bias));
        }
        out.push(("head.weight".into(), &self.head.weight));
        if let Some(b) = &self.head.bias {
            out.push(("head.bias".into(), b));
        }
        out.extend(self.corm.named());
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.encoder.iter_mut().enumerate() {
            out.push((format!("encoder.layer{i}.kernel"), &mut layer.kernel));
            out.push((format!("encoder.layer{i}.bias"), &mut layer.bias));
        }
        out.push(("head.weight".into(), &mut self.head.weight));
        if let Some(b) = &mut self.head.bias {
            out.push(("head.bias".into(), b));
        }
        out.extend(self.corm.named_mut());
        out
    }

    /// Checks every tensor's shape against `config`, naming the first offender.
    pub fn check(&self, config: &NetworkConfig) -> Result<(), ModelError> {
        config.validate()?;
        let reference = NetworkParams::init(config, &mut ChaCha8Rng::seed_from_u64(0))?;
        let ours = self.named();
        let theirs = reference.named();
        if ours.len() != theirs.len() {
            return Err(ModelError::Config(format!(
                "expected {} parameter tensors, found {}",
                theirs.len(),
                ours.len()
            )));
        }
        for ((name, t), (ref_name, r)) in ours.iter().zip(&theirs) {
            if name != ref_name || t.shape() != r.shape() {
                return Err(ModelError::Config(format!(
                    "tensor `{ref_name}` should have shape {:?}, found `{name}` with {:?}",
                    r.shape(),
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Prediction branch and relation module.
    Train,
    /// Prediction branch only; the relation module is never evaluated.
    Infer,
}

/// Graph handles for [`NetworkParams`]. `corm` is absent in inference mode.
#[derive(Clone, Debug)]
pub struct NetworkNodes {
    pub encoder: Vec<(NodeId, NodeId)>,
    pub head: LinearNodes,
    pub corm: Option<CormNodes>,
}

impl NetworkNodes {
    pub fn register(g: &mut Graph, params: &NetworkParams, config: &NetworkConfig, mode: Mode) -> Self {
        let encoder = params
            .encoder
            .iter()
            .map(|l| (g.param(l.kernel.clone()), g.param(l.bias.clone())))
            .collect();
        let head = LinearNodes::register(g, &params.head);
        let corm = (mode == Mode::Train).then(|| params.corm.register(g, &config.corm));
        NetworkNodes { encoder, head, corm }
    }

    /// Rebuilds handles from ids laid out in [`NetworkParams::named`] order;
    /// the module's ids are read only in [`Mode::Train`].
    pub fn from_ids(params: &NetworkParams, ids: &[NodeId], mode: Mode) -> Option<Self> {
        let mut it = ids.iter().copied();
        let mut encoder = Vec::with_capacity(params.encoder.len());
        for _ in &params.encoder {
            encoder.push((it.next()?, it.next()?));
        }
        let weight = it.next()?;
        let bias = match params.head.bias {
            Some(_) => Some(it.next()?),
            None => None,
        };
        let corm = match mode {
            Mode::Train => Some(CormNodes::from_ids(&params.corm, &mut it)?),
            Mode::Infer => None,
        };
        Some(NetworkNodes {
            encoder,
            head: LinearNodes { weight, bias },
            corm,
        })
    }

    /// Every registered node in the same order as [`NetworkParams::named`].
    pub fn ordered(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        for &(k, b) in &self.encoder {
            out.push(k);
            out.push(b);
        }
        out.push(self.head.weight);
        out.extend(self.head.bias);
        if let Some(c) = &self.corm {
            out.push(c.reduce.weight);
            out.extend(c.reduce.bias);
            out.push(c.class_weight);
            out.push(c.class_bias);
            for corr in [&c.visual, &c.semantic] {
                match corr {
                    corm::CorrelatorNodes::Difference { phi, psi } => {
                        for lin in [phi, psi] {
                            out.push(lin.weight);
                            out.extend(lin.bias);
                        }
                    }
                    corm::CorrelatorNodes::Attention { query, key } => {
                        out.push(*query);
                        out.push(*key);
                    }
                }
            }
            out.push(c.alpha);
            out.push(c.beta);
        }
        out
    }
}

pub fn encode_node(g: &mut Graph, features: NodeId, layers: &[(NodeId, NodeId)]) -> Result<NodeId, ModelError> {
    let mut h = features;
    for &(k, b) in layers {
        let c = g.conv1d(h, k, b).map_err(ModelError::Encoder)?;
        h = g.relu(c).map_err(ModelError::Encoder)?;
    }
    Ok(h)
}

pub fn predict_node(g: &mut Graph, x0: NodeId, head: &LinearNodes) -> Result<NodeId, ModelError> {
    let logits = head.apply(g, x0).map_err(ModelError::Head)?;
    g.sigmoid(logits).map_err(ModelError::Head)
}

/// Outputs of one forward pass on the graph.
#[derive(Clone, Copy, Debug)]
pub struct ForwardNodes {
    pub x0: NodeId,
    pub probs: NodeId,
    pub cooc: Option<NodeId>,
}

/// Forward pass on the graph. `semantic` must be given when the module is registered.
/// Only the first `valid_frames` rows contribute to the relation matrix.
pub fn forward_node(
    g: &mut Graph,
    features: NodeId,
    semantic: Option<NodeId>,
    nodes: &NetworkNodes,
    config: &NetworkConfig,
    valid_frames: usize,
) -> Result<ForwardNodes, ModelError> {
    let x0 = encode_node(g, features, &nodes.encoder)?;
    let probs = predict_node(g, x0, &nodes.head)?;
    let cooc = match (&nodes.corm, semantic) {
        (Some(c), Some(we)) => Some(corm::corm_forward_node(g, x0, we, c, &config.corm, valid_frames)?),
        (Some(_), None) => {
            return Err(ModelError::Config("train mode needs the semantic space".into()));
        }
        (None, _) => None,
    };
    Ok(ForwardNodes { x0, probs, cooc })
}

/// Loss terms on the graph.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveNodes {
    pub forward: ForwardNodes,
    pub bce: NodeId,
    pub mse: NodeId,
    pub total: NodeId,
}

/// Per-frame targets and co-occurrence ground truth for one training window.
#[derive(Clone, Debug)]
pub struct WindowTargets<'a> {
    /// `T x N`, zero rows beyond `valid_frames`.
    pub targets: &'a Tensor,
    pub cooc: &'a Tensor,
    pub valid_frames: usize,
}

/// `bce + a * mse` on one window. BCE covers the valid frames only. With
/// `normalize_cooc` both matrices are divided by the number of valid frames.
#[allow(clippy::too_many_arguments)]
pub fn objective_node(
    g: &mut Graph,
    features: &Tensor,
    semantic: &SemanticSpace,
    window: &WindowTargets<'_>,
    nodes: &NetworkNodes,
    config: &NetworkConfig,
    balance: f64,
    normalize_cooc: bool,
) -> Result<ObjectiveNodes, ModelError> {
    let total_frames = features.rows();
    if window.valid_frames == 0 || window.valid_frames > total_frames {
        return Err(ModelError::Config(format!(
            "valid frame count {} outside 1..={total_frames}",
            window.valid_frames
        )));
    }
    let x = g.constant(features.clone());
    let we = g.constant(semantic.matrix().clone());
    let forward = forward_node(g, x, Some(we), nodes, config, window.valid_frames)?;
    let cooc = forward
        .cooc
        .ok_or_else(|| ModelError::Config("objective needs train-mode nodes".into()))?;

    let loss_err = ModelError::Loss;
    let probs = if window.valid_frames < total_frames {
        g.slice_rows(forward.probs, 0, window.valid_frames).map_err(loss_err)?
    } else {
        forward.probs
    };
    let targets = g.constant(window.targets.clone());
    let targets = if window.valid_frames < window.targets.rows() {
        g.slice_rows(targets, 0, window.valid_frames).map_err(loss_err)?
    } else {
        targets
    };
    let bce = metrics::bce_node(g, probs, targets).map_err(loss_err)?;

    let (pred, truth) = if normalize_cooc {
        let s = 1.0 / window.valid_frames as f64;
        let p = g.scale(cooc, s).map_err(loss_err)?;
        let t = g.constant(window.cooc.map(|v| v * s));
        (p, t)
    } else {
        (cooc, g.constant(window.cooc.clone()))
    };
    let mse = metrics::cooc_mse_node(g, pred, truth).map_err(loss_err)?;
    let weighted = g.scale(mse, balance).map_err(loss_err)?;
    let total = g.add(bce, weighted).map_err(loss_err)?;
    Ok(ObjectiveNodes {
        forward,
        bce,
        mse,
        total,
    })
}

fn one_shot(f: impl FnOnce(&mut Graph) -> Result<NodeId, ModelError>) -> Result<Tensor, ModelError> {
    let mut g = Graph::new();
    g.set_recording(false);
    let out = f(&mut g)?;
    Ok(g.value(out).clone())
}

/// `L` layers of same-length convolution followed by a rectifier.
pub fn encode(features: &Tensor, layers: &[ConvLayer]) -> Result<Tensor, ModelError> {
    one_shot(|g| {
        let x = g.constant(features.clone());
        let nodes: Vec<_> = layers
            .iter()
            .map(|l| (g.constant(l.kernel.clone()), g.constant(l.bias.clone())))
            .collect();
        encode_node(g, x, &nodes)
    })
}

/// Per-frame class probabilities.
pub fn predict(x0: &Tensor, head: &Linear) -> Result<Tensor, ModelError> {
    one_shot(|g| {
        let x = g.constant(x0.clone());
        let nodes = LinearNodes::register(g, head);
        predict_node(g, x, &nodes)
    })
}

/// Runs the network. In [`Mode::Infer`] the module and the semantic space are
/// never touched and the second output is `None`.
pub fn cor_network_forward(
    features: &Tensor,
    semantic: Option<&SemanticSpace>,
    params: &NetworkParams,
    config: &NetworkConfig,
    mode: Mode,
) -> Result<(Tensor, Option<Tensor>), ModelError> {
    let mut g = Graph::new();
    g.set_recording(false);
    let x = g.constant(features.clone());
    let we = match mode {
        Mode::Train => Some(
            g.constant(
                semantic
                    .ok_or_else(|| ModelError::Config("train mode needs the semantic space".into()))?
                    .matrix()
                    .clone(),
            ),
        ),
        Mode::Infer => None,
    };
    let nodes = NetworkNodes::register(&mut g, params, config, mode);
    let out = forward_node(&mut g, x, we, &nodes, config, features.rows())?;
    Ok((g.value(out.probs).clone(), out.cooc.map(|r| g.value(r).clone())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corm::CorrelationFn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn impulse_layer_reproduces_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, &[6, 3]).map(f64::abs);
        let mut kernel = Tensor::zeros(&[3, 3, 3]);
        for c in 0..3 {
            kernel.set(&[1, c, c], 1.0);
        }
        let layer = ConvLayer {
            kernel,
            bias: Tensor::zeros(&[3]),
        };
        assert_eq!(encode(&x, &[layer]).unwrap(), x);
    }

    #[test]
    fn output_length_matches_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &(t, k, layers) in &[(1, 9, 3), (4, 3, 1), (17, 5, 2)] {
            let cfg = NetworkConfig {
                encoder: EncoderConfig {
                    d_in: 3,
                    hidden: 4,
                    layers,
                    kernel: k,
                },
                corm: CormConfig {
                    d0: 4,
                    dv: 2,
                    num_classes: 2,
                    embed_dim: 3,
                    d_k: 2,
                    ..CormConfig::reference()
                },
            };
            let p = NetworkParams::init(&cfg, &mut rng).unwrap();
            let x = random(&mut rng, &[t, 3]);
            assert_eq!(encode(&x, &p.encoder).unwrap().shape(), &[t, 4]);
        }
    }

    #[test]
    fn single_layer_matches_sliding_window_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (t, cin, cout, k) = (5, 2, 3, 3);
        let x = random(&mut rng, &[t, cin]);
        let layer = ConvLayer {
            kernel: random(&mut rng, &[k, cin, cout]),
            bias: random(&mut rng, &[cout]),
        };
        let out = encode(&x, std::slice::from_ref(&layer)).unwrap();
        for ti in 0..t {
            for o in 0..cout {
                let mut acc = layer.bias.data()[o];
                for j in 0..k {
                    let src = ti as isize + j as isize - (k / 2) as isize;
                    if (0..t as isize).contains(&src) {
                        for i in 0..cin {
                            acc += x.at(&[src as usize, i]) * layer.kernel.at(&[j, i, o]);
                        }
                    }
                }
                assert!((out.at(&[ti, o]) - acc.max(0.0)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn zero_head_predicts_one_half() {
        let x0 = Tensor::full(&[3, 4], 2.0);
        let head = Linear {
            weight: Tensor::zeros(&[4, 2]),
            bias: Some(Tensor::zeros(&[2])),
        };
        assert!(predict(&x0, &head).unwrap().data().iter().all(|&p| p == 0.5));
    }

    #[test]
    fn large_bias_saturates_class() {
        let x0 = Tensor::full(&[3, 4], 0.1);
        let head = Linear {
            weight: Tensor::zeros(&[4, 2]),
            bias: Some(Tensor::vector(vec![0.0, 40.0])),
        };
        let p = predict(&x0, &head).unwrap();
        for t in 0..3 {
            assert!(p.at(&[t, 1]) > 1.0 - 1e-12);
        }
    }

    #[test]
    fn head_matches_affine_sigmoid_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x0 = random(&mut rng, &[5, 4]);
        let head = Linear {
            weight: random(&mut rng, &[4, 3]),
            bias: Some(random(&mut rng, &[3])),
        };
        let p = predict(&x0, &head).unwrap();
        for t in 0..5 {
            for c in 0..3 {
                let z: f64 = head.bias.as_ref().unwrap().data()[c]
                    + (0..4).map(|d| x0.at(&[t, d]) * head.weight.at(&[d, c])).sum::<f64>();
                assert!((p.at(&[t, c]) - 1.0 / (1.0 + (-z).exp())).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn mismatched_config_is_rejected() {
        let cfg = NetworkConfig {
            encoder: EncoderConfig::synthetic_default(5),
            corm: CormConfig {
                d0: 32,
                vcor_fn: CorrelationFn::M1,
                ..CormConfig::reference()
            },
        };
        assert!(matches!(cfg.validate(), Err(ModelError::Config(_))));
        let even = EncoderConfig {
            kernel: 4,
            ..EncoderConfig::synthetic_default(5)
        };
        assert!(even.validate().is_err());
    }
}
