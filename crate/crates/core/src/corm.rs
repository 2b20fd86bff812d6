//! Co-occurrence relation module.
//!
//! The visual branch reduces the encoder feature `X0` (`T x D0`) to `X`
//! (`T x Dv`), expands it into one feature per class (`T x N x Dv`) and turns
//! every timestep into an `N x N` relation matrix. The semantic branch does the
//! same for the fixed label embeddings. The two are fused as
//! `R = sum_t (alpha * Rv_t + beta * Rs)`.
//!
//! Two relation functions are available:
//! * [`CorrelationFn::M1`]: `sigmoid(phi(x_i) - psi(x_j))` with `phi`, `psi` affine maps to one value.
//! * [`CorrelationFn::M2`]: `softmax(Q K^T / sqrt(d_k))` with bias-free projections `Q = X h_q`, `K = X h_k`.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embeddings::SemanticSpace;
use crate::numcore::{Graph, NodeId, NumError, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CorrelationFn {
    M1,
    M2,
}

/// Part of the module an error came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Config,
    Preprocess,
    ClassFeatures,
    Visual,
    Semantic,
    Fusion,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Config => "config",
            Stage::Preprocess => "preprocess",
            Stage::ClassFeatures => "class features",
            Stage::Visual => "VCOR branch",
            Stage::Semantic => "SCOR branch",
            Stage::Fusion => "fusion",
        })
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
#[error("{stage}: {source}")]
pub struct CormError {
    pub stage: Stage,
    #[source]
    pub source: NumError,
}

impl CormError {
    fn at(stage: Stage) -> impl FnOnce(NumError) -> CormError {
        move |source| CormError { stage, source }
    }

    fn config(message: String) -> CormError {
        CormError {
            stage: Stage::Config,
            source: NumError::InvalidArgument(message),
        }
    }
}

fn default_half() -> f64 {
    0.5
}

/// Shape and behaviour of the module.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CormConfig {
    /// Encoder output width.
    pub d0: usize,
    /// Reduced visual width.
    pub dv: usize,
    pub num_classes: usize,
    /// Label embedding width.
    pub embed_dim: usize,
    /// Attention projection width.
    pub d_k: usize,
    pub vcor_fn: CorrelationFn,
    pub scor_fn: CorrelationFn,
    #[serde(default = "default_half")]
    pub alpha_init: f64,
    #[serde(default = "default_half")]
    pub beta_init: f64,
    /// Hold `alpha` at its initial value.
    #[serde(default)]
    pub freeze_alpha: bool,
    /// Hold `beta` at its initial value.
    #[serde(default)]
    pub freeze_beta: bool,
    /// Add the semantic matrix once rather than once per timestep.
    #[serde(default)]
    pub scor_once: bool,
}

impl CormConfig {
    /// Dv=32, d_k=16, visual M1, semantic M2 on a 1024-wide encoder with 65 classes
    /// and 768-wide label embeddings.
    pub fn reference() -> Self {
        CormConfig {
            d0: 1024,
            dv: 32,
            num_classes: 65,
            embed_dim: 768,
            d_k: 16,
            vcor_fn: CorrelationFn::M1,
            scor_fn: CorrelationFn::M2,
            alpha_init: 0.5,
            beta_init: 0.5,
            freeze_alpha: false,
            freeze_beta: false,
            scor_once: false,
        }
    }

    pub fn validate(&self) -> Result<(), CormError> {
        for (name, v) in [
            ("d0", self.d0),
            ("dv", self.dv),
            ("num_classes", self.num_classes),
            ("embed_dim", self.embed_dim),
            ("d_k", self.d_k),
        ] {
            if v == 0 {
                return Err(CormError::config(format!("{name} must be at least 1")));
            }
        }
        if !self.alpha_init.is_finite() || !self.beta_init.is_finite() {
            return Err(CormError::config("fusion weights must be finite".into()));
        }
        Ok(())
    }
}

/// Affine map stored as `[in, out]` weight plus optional `[out]` bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    /// Uniform weights in `+-1/sqrt(fan_in)`, zero bias.
    pub fn init<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        Linear {
            weight: uniform(rng, &[fan_in, fan_out], fan_in),
            bias: bias.then(|| Tensor::zeros(&[fan_out])),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

pub(crate) fn uniform<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-bound..=bound)).collect())
        .expect("shape matches")
}

/// Learnable part of one relation function.
#[derive(Clone, Debug, PartialEq)]
pub enum Correlator {
    Difference { phi: Linear, psi: Linear },
    Attention { query: Tensor, key: Tensor },
}

impl Correlator {
    pub fn init<R: Rng>(rng: &mut R, kind: CorrelationFn, width: usize, d_k: usize) -> Self {
        match kind {
            CorrelationFn::M1 => Correlator::Difference {
                phi: Linear::init(rng, width, 1, true),
                psi: Linear::init(rng, width, 1, true),
            },
            CorrelationFn::M2 => Correlator::Attention {
                query: uniform(rng, &[width, d_k], width),
                key: uniform(rng, &[width, d_k], width),
            },
        }
    }

    pub fn kind(&self) -> CorrelationFn {
        match self {
            Correlator::Difference { .. } => CorrelationFn::M1,
            Correlator::Attention { .. } => CorrelationFn::M2,
        }
    }

    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        match self {
            Correlator::Difference { phi, psi } => {
                for (name, lin) in [("phi", phi), ("psi", psi)] {
                    out.push((format!("{prefix}.{name}.weight"), &lin.weight));
                    if let Some(b) = &lin.bias {
                        out.push((format!("{prefix}.{name}.bias"), b));
                    }
                }
            }
            Correlator::Attention { query, key } => {
                out.push((format!("{prefix}.h_q"), query));
                out.push((format!("{prefix}.h_k"), key));
            }
        }
    }

    fn named_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        match self {
            Correlator::Difference { phi, psi } => {
                for (name, lin) in [("phi", phi), ("psi", psi)] {
                    out.push((format!("{prefix}.{name}.weight"), &mut lin.weight));
                    if let Some(b) = &mut lin.bias {
                        out.push((format!("{prefix}.{name}.bias"), b));
                    }
                }
            }
            Correlator::Attention { query, key } => {
                out.push((format!("{prefix}.h_q"), query));
                out.push((format!("{prefix}.h_k"), key));
            }
        }
    }
}

/// Every learnable tensor of the module.
#[derive(Clone, Debug, PartialEq)]
pub struct CormParams {
    /// `f`: `D0 -> Dv`.
    pub reduce: Linear,
    /// `g`: one weight per class on the unsqueezed class axis.
    pub class_weight: Tensor,
    /// `g`: one bias per class.
    pub class_bias: Tensor,
    pub visual: Correlator,
    pub semantic: Correlator,
    pub alpha: Tensor,
    pub beta: Tensor,
}

impl CormParams {
    pub fn init<R: Rng>(config: &CormConfig, rng: &mut R) -> Result<Self, CormError> {
        config.validate()?;
        Ok(CormParams {
            reduce: Linear::init(rng, config.d0, config.dv, true),
            class_weight: uniform(rng, &[config.num_classes], 1),
            class_bias: Tensor::zeros(&[config.num_classes]),
            visual: Correlator::init(rng, config.vcor_fn, config.dv, config.d_k),
            semantic: Correlator::init(rng, config.scor_fn, config.embed_dim, config.d_k),
            alpha: Tensor::scalar(config.alpha_init),
            beta: Tensor::scalar(config.beta_init),
        })
    }

    /// Tensors with stable dotted names, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("corm.f.weight".to_string(), &self.reduce.weight)];
        if let Some(b) = &self.reduce.bias {
            out.push(("corm.f.bias".into(), b));
        }
        out.push(("corm.g.weight".into(), &self.class_weight));
        out.push(("corm.g.bias".into(), &self.class_bias));
        self.visual.named("corm.vcor", &mut out);
        self.semantic.named("corm.scor", &mut out);
        out.push(("corm.alpha".into(), &self.alpha));
        out.push(("corm.beta".into(), &self.beta));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![("corm.f.weight".to_string(), &mut self.reduce.weight)];
        if let Some(b) = &mut self.reduce.bias {
            out.push(("corm.f.bias".into(), b));
        }
        out.push(("corm.g.weight".into(), &mut self.class_weight));
        out.push(("corm.g.bias".into(), &mut self.class_bias));
        self.visual.named_mut("corm.vcor", &mut out);
        self.semantic.named_mut("corm.scor", &mut out);
        out.push(("corm.alpha".into(), &mut self.alpha));
        out.push(("corm.beta".into(), &mut self.beta));
        out
    }

    pub fn count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Registers every tensor as a leaf; `alpha`/`beta` are constants when frozen.
    pub fn register(&self, g: &mut Graph, config: &CormConfig) -> CormNodes {
        CormNodes {
            reduce: LinearNodes::register(g, &self.reduce),
            class_weight: g.param(self.class_weight.clone()),
            class_bias: g.param(self.class_bias.clone()),
            visual: CorrelatorNodes::register(g, &self.visual),
            semantic: CorrelatorNodes::register(g, &self.semantic),
            alpha: g.leaf(self.alpha.clone(), !config.freeze_alpha),
            beta: g.leaf(self.beta.clone(), !config.freeze_beta),
        }
    }
}

impl CormNodes {
    /// Rebuilds handles from ids laid out in [`CormParams::named`] order, e.g.
    /// leaves registered by a caller that owns the graph.
    pub fn from_ids(params: &CormParams, ids: &mut impl Iterator<Item = NodeId>) -> Option<Self> {
        let linear = |lin: &Linear, ids: &mut dyn Iterator<Item = NodeId>| -> Option<LinearNodes> {
            let weight = ids.next()?;
            let bias = match lin.bias {
                Some(_) => Some(ids.next()?),
                None => None,
            };
            Some(LinearNodes { weight, bias })
        };
        let reduce = linear(&params.reduce, ids)?;
        let class_weight = ids.next()?;
        let class_bias = ids.next()?;
        let correlator = |c: &Correlator, ids: &mut dyn Iterator<Item = NodeId>| -> Option<CorrelatorNodes> {
            Some(match c {
                Correlator::Difference { phi, psi } => CorrelatorNodes::Difference {
                    phi: linear(phi, ids)?,
                    psi: linear(psi, ids)?,
                },
                Correlator::Attention { .. } => CorrelatorNodes::Attention {
                    query: ids.next()?,
                    key: ids.next()?,
                },
            })
        };
        let visual = correlator(&params.visual, ids)?;
        let semantic = correlator(&params.semantic, ids)?;
        Some(CormNodes {
            reduce,
            class_weight,
            class_bias,
            visual,
            semantic,
            alpha: ids.next()?,
            beta: ids.next()?,
        })
    }
}

/// Exact number of learnable scalars for `config`.
pub fn param_count(config: &CormConfig) -> usize {
    let correlator = |kind: CorrelationFn, width: usize| match kind {
        CorrelationFn::M1 => 2 * (width + 1),
        CorrelationFn::M2 => 2 * width * config.d_k,
    };
    (config.d0 * config.dv + config.dv)
        + 2 * config.num_classes
        + correlator(config.vcor_fn, config.dv)
        + correlator(config.scor_fn, config.embed_dim)
        + 2
}

#[derive(Clone, Copy, Debug)]
pub struct LinearNodes {
    pub weight: NodeId,
    pub bias: Option<NodeId>,
}

impl LinearNodes {
    pub fn register(g: &mut Graph, lin: &Linear) -> Self {
        LinearNodes {
            weight: g.param(lin.weight.clone()),
            bias: lin.bias.as_ref().map(|b| g.param(b.clone())),
        }
    }

    pub fn apply(&self, g: &mut Graph, x: NodeId) -> Result<NodeId, NumError> {
        match self.bias {
            Some(b) => g.affine(x, self.weight, b),
            None => g.matmul(x, self.weight),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum CorrelatorNodes {
    Difference { phi: LinearNodes, psi: LinearNodes },
    Attention { query: NodeId, key: NodeId },
}

impl CorrelatorNodes {
    pub fn register(g: &mut Graph, c: &Correlator) -> Self {
        match c {
            Correlator::Difference { phi, psi } => CorrelatorNodes::Difference {
                phi: LinearNodes::register(g, phi),
                psi: LinearNodes::register(g, psi),
            },
            Correlator::Attention { query, key } => CorrelatorNodes::Attention {
                query: g.param(query.clone()),
                key: g.param(key.clone()),
            },
        }
    }
}

/// Graph handles for [`CormParams`].
#[derive(Clone, Copy, Debug)]
pub struct CormNodes {
    pub reduce: LinearNodes,
    pub class_weight: NodeId,
    pub class_bias: NodeId,
    pub visual: CorrelatorNodes,
    pub semantic: CorrelatorNodes,
    pub alpha: NodeId,
    pub beta: NodeId,
}

/// `X = f(X0)`, applied per timestep.
pub fn preprocess_node(g: &mut Graph, x0: NodeId, reduce: &LinearNodes) -> Result<NodeId, CormError> {
    reduce.apply(g, x0).map_err(CormError::at(Stage::Preprocess))
}

/// `X_cls(t, n, d) = w_n * X(t, d) + b_n`.
pub fn class_features_node(g: &mut Graph, x: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId, CormError> {
    g.class_expand(x, weight, bias).map_err(CormError::at(Stage::ClassFeatures))
}

/// Relation matrix of the rows of `features` (`[.., N, D]` -> `[.., N, N]`).
pub fn correlate_node(
    g: &mut Graph,
    features: NodeId,
    correlator: &CorrelatorNodes,
) -> Result<NodeId, NumError> {
    match correlator {
        CorrelatorNodes::Difference { phi, psi } => {
            let a = phi.apply(g, features)?;
            let c = psi.apply(g, features)?;
            let diff = g.pairwise_diff(a, c)?;
            g.sigmoid(diff)
        }
        CorrelatorNodes::Attention { query, key } => {
            let q = g.matmul(features, *query)?;
            let k = g.matmul(features, *key)?;
            let d_k = g.value(*query).cols();
            let scores = g.matmul_nt(q, k)?;
            let scaled = g.scale(scores, 1.0 / (d_k as f64).sqrt())?;
            g.softmax(scaled)
        }
    }
}

/// `alpha * sum_t Rv_t + k * beta * Rs` with `k = T`, or `k = 1` when `scor_once`.
pub fn fuse_and_sum_node(
    g: &mut Graph,
    visual_stack: NodeId,
    semantic: NodeId,
    alpha: NodeId,
    beta: NodeId,
    scor_once: bool,
) -> Result<NodeId, CormError> {
    let run = |g: &mut Graph| -> Result<NodeId, NumError> {
        let stack_shape = g.value(visual_stack).shape().to_vec();
        if stack_shape.len() != 3 || stack_shape[0] == 0 || stack_shape[1..] != *g.value(semantic).shape() {
            return Err(NumError::ShapeMismatch {
                op: "fuse_and_sum",
                left: stack_shape,
                right: g.value(semantic).shape().to_vec(),
            });
        }
        let steps = stack_shape[0];
        let visual_sum = g.sum_axis(visual_stack, 0)?;
        let visual = g.scale_by(alpha, visual_sum)?;
        let mut sem = g.scale_by(beta, semantic)?;
        if !scor_once {
            sem = g.scale(sem, steps as f64)?;
        }
        g.add(visual, sem)
    };
    run(g).map_err(CormError::at(Stage::Fusion))
}

/// Full module on the graph: returns the fused `N x N` matrix.
///
/// Only the first `valid_frames` timesteps enter the sum; the rest are padding.
pub fn corm_forward_node(
    g: &mut Graph,
    x0: NodeId,
    semantic_space: NodeId,
    nodes: &CormNodes,
    config: &CormConfig,
    valid_frames: usize,
) -> Result<NodeId, CormError> {
    let width = g.value(x0).shape().get(1).copied().unwrap_or(0);
    if g.value(x0).rank() != 2 || width != config.d0 {
        return Err(CormError {
            stage: Stage::Preprocess,
            source: NumError::BadShape {
                op: "corm_forward",
                shape: g.value(x0).shape().to_vec(),
                expected: format!("[T, {}]", config.d0),
            },
        });
    }
    let x = preprocess_node(g, x0, &nodes.reduce)?;
    let x = if valid_frames < g.value(x).shape()[0] {
        g.slice_rows(x, 0, valid_frames).map_err(CormError::at(Stage::Preprocess))?
    } else {
        x
    };
    let classes = class_features_node(g, x, nodes.class_weight, nodes.class_bias)?;
    let visual = correlate_node(g, classes, &nodes.visual).map_err(CormError::at(Stage::Visual))?;
    let semantic = correlate_node(g, semantic_space, &nodes.semantic).map_err(CormError::at(Stage::Semantic))?;
    fuse_and_sum_node(g, visual, semantic, nodes.alpha, nodes.beta, config.scor_once)
}

fn one_shot<T>(f: impl FnOnce(&mut Graph) -> Result<NodeId, T>) -> Result<Tensor, T> {
    let mut g = Graph::new();
    g.set_recording(false);
    let out = f(&mut g)?;
    Ok(g.value(out).clone())
}

/// Tensor-level [`preprocess_node`].
pub fn preprocess(x0: &Tensor, reduce: &Linear) -> Result<Tensor, CormError> {
    one_shot(|g| {
        let x = g.constant(x0.clone());
        let nodes = LinearNodes::register(g, reduce);
        preprocess_node(g, x, &nodes)
    })
}

/// Tensor-level [`class_features_node`].
pub fn class_features(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor, CormError> {
    one_shot(|g| {
        let x = g.constant(x.clone());
        let w = g.constant(weight.clone());
        let b = g.constant(bias.clone());
        class_features_node(g, x, w, b)
    })
}

/// `sigmoid(phi(F_i) - psi(F_j))` for every row pair of `features`.
pub fn correlate_m1(features: &Tensor, phi: &Linear, psi: &Linear) -> Result<Tensor, NumError> {
    one_shot(|g| {
        let f = g.constant(features.clone());
        let c = CorrelatorNodes::Difference {
            phi: LinearNodes::register(g, phi),
            psi: LinearNodes::register(g, psi),
        };
        correlate_node(g, f, &c)
    })
}

/// Row-wise `softmax((F h_q)(F h_k)^T / sqrt(d_k))`.
pub fn correlate_m2(features: &Tensor, query: &Tensor, key: &Tensor) -> Result<Tensor, NumError> {
    one_shot(|g| {
        let f = g.constant(features.clone());
        let c = CorrelatorNodes::Attention {
            query: g.constant(query.clone()),
            key: g.constant(key.clone()),
        };
        correlate_node(g, f, &c)
    })
}

/// Tensor-level [`fuse_and_sum_node`] over a sequence of per-timestep matrices.
pub fn fuse_and_sum(
    visual: &[Tensor],
    semantic: &Tensor,
    alpha: f64,
    beta: f64,
    scor_once: bool,
) -> Result<Tensor, CormError> {
    let fusion_err = |source| CormError {
        stage: Stage::Fusion,
        source,
    };
    let first = visual.first().ok_or_else(|| {
        fusion_err(NumError::InvalidArgument("at least one timestep is required".into()))
    })?;
    let mut data = Vec::with_capacity(visual.len() * first.len());
    for m in visual {
        if m.shape() != first.shape() {
            return Err(fusion_err(NumError::ShapeMismatch {
                op: "fuse_and_sum",
                left: first.shape().to_vec(),
                right: m.shape().to_vec(),
            }));
        }
        data.extend_from_slice(m.data());
    }
    let mut shape = vec![visual.len()];
    shape.extend_from_slice(first.shape());
    let stack = Tensor::new(shape, data).map_err(fusion_err)?;
    one_shot(|g| {
        let v = g.constant(stack);
        let s = g.constant(semantic.clone());
        let a = g.constant(Tensor::scalar(alpha));
        let b = g.constant(Tensor::scalar(beta));
        fuse_and_sum_node(g, v, s, a, b, scor_once)
    })
}

/// Fused relation matrix for one sequence of encoder features.
pub fn corm_forward(
    x0: &Tensor,
    semantic_space: &SemanticSpace,
    params: &CormParams,
    config: &CormConfig,
) -> Result<Tensor, CormError> {
    check_params(params, config)?;
    one_shot(|g| {
        let x = g.constant(x0.clone());
        let we = g.constant(semantic_space.matrix().clone());
        let nodes = params.register(g, config);
        corm_forward_node(g, x, we, &nodes, config, x0.rows())
    })
}

/// Verifies that parameter shapes agree with `config`.
pub fn check_params(params: &CormParams, config: &CormConfig) -> Result<(), CormError> {
    config.validate()?;
    let mismatch = |what: &str, got: &[usize], want: Vec<usize>| {
        CormError::config(format!("{what} has shape {got:?}, config implies {want:?}"))
    };
    if params.reduce.weight.shape() != [config.d0, config.dv] {
        return Err(mismatch("corm.f.weight", params.reduce.weight.shape(), vec![config.d0, config.dv]));
    }
    if params.class_weight.shape() != [config.num_classes] {
        return Err(mismatch("corm.g.weight", params.class_weight.shape(), vec![config.num_classes]));
    }
    for (name, c, kind, width) in [
        ("corm.vcor", &params.visual, config.vcor_fn, config.dv),
        ("corm.scor", &params.semantic, config.scor_fn, config.embed_dim),
    ] {
        if c.kind() != kind {
            return Err(CormError::config(format!("{name} is {:?}, config says {kind:?}", c.kind())));
        }
        let input = match c {
            Correlator::Difference { phi, .. } => phi.in_dim(),
            Correlator::Attention { query, .. } => query.shape()[0],
        };
        if input != width {
            return Err(CormError::config(format!("{name} expects width {input}, config implies {width}")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn lin(weight: Vec<Vec<f64>>, bias: Option<Vec<f64>>) -> Linear {
        Linear {
            weight: Tensor::from_rows(&weight).unwrap(),
            bias: bias.map(Tensor::vector),
        }
    }

    #[test]
    fn identity_reduce_is_identity() {
        let x0 = Tensor::from_rows(&[vec![1.0, -2.0, 3.0], vec![0.5, 0.0, 4.0]]).unwrap();
        let f = Linear {
            weight: Tensor::eye(3),
            bias: Some(Tensor::zeros(&[3])),
        };
        assert_eq!(preprocess(&x0, &f).unwrap(), x0);
    }

    #[test]
    fn zero_weight_reduce_gives_bias_rows() {
        let x0 = Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 9.0], vec![3.0, 3.0]]).unwrap();
        let f = lin(vec![vec![0.0; 3]; 2], Some(vec![0.1, -0.2, 0.3]));
        let x = preprocess(&x0, &f).unwrap();
        for t in 0..3 {
            assert_eq!(x.row(t), &[0.1, -0.2, 0.3]);
        }
    }

    #[test]
    fn width_mismatch_is_attributed_to_preprocess() {
        let x0 = Tensor::zeros(&[4, 5]);
        let f = Linear::init(&mut ChaCha8Rng::seed_from_u64(0), 6, 2, true);
        assert_eq!(preprocess(&x0, &f).unwrap_err().stage, Stage::Preprocess);
    }

    #[test]
    fn class_features_unit_map_copies_input() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![-3.0, 0.5]]).unwrap();
        let out = class_features(&x, &Tensor::ones(&[3]), &Tensor::zeros(&[3])).unwrap();
        assert_eq!(out.shape(), &[2, 3, 2]);
        for t in 0..2 {
            for n in 0..3 {
                for d in 0..2 {
                    assert_eq!(out.at(&[t, n, d]), x.at(&[t, d]));
                }
            }
        }
    }

    #[test]
    fn class_features_zero_weight_gives_class_constants() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0, 7.0]]).unwrap();
        let out = class_features(&x, &Tensor::zeros(&[2]), &Tensor::vector(vec![4.0, -1.0])).unwrap();
        assert_eq!(out.data(), &[4.0, 4.0, 4.0, -1.0, -1.0, -1.0]);
    }

    #[test]
    fn class_features_hand_example() {
        let x = Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let out = class_features(&x, &Tensor::vector(vec![1.0, 2.0]), &Tensor::vector(vec![0.0, 1.0])).unwrap();
        assert_eq!(out.data(), &[3.0, 4.0, 7.0, 9.0]);
    }

    #[test]
    fn m1_with_zero_maps_is_one_half() {
        let f = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, -4.0], vec![0.0, 9.0]]).unwrap();
        let zero = lin(vec![vec![0.0], vec![0.0]], Some(vec![0.0]));
        let out = correlate_m1(&f, &zero, &zero).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn m1_hand_value() {
        // phi(F_0) = 1, psi(F_1) = 0
        let f = Tensor::from_rows(&[vec![1.0], vec![0.0]]).unwrap();
        let phi = lin(vec![vec![1.0]], Some(vec![0.0]));
        let psi = lin(vec![vec![1.0]], Some(vec![0.0]));
        let out = correlate_m1(&f, &phi, &psi).unwrap();
        assert!((out.at(&[0, 1]) - 0.731_058_578_630_004_9).abs() < 1e-12);
    }

    #[test]
    fn m2_identical_rows_are_uniform() {
        let f = Tensor::from_rows(&vec![vec![0.3, -1.2, 2.0]; 4]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = uniform(&mut rng, &[3, 2], 3);
        let k = uniform(&mut rng, &[3, 2], 3);
        let out = correlate_m2(&f, &q, &k).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn m2_hand_logits() {
        // d_k = 1, F = I, h_q = h_k = (1, -1)^T gives logits [[1, -1], [-1, 1]], which
        // differ from [[2, 0], [0, 2]] by a per-row constant.
        let f = Tensor::eye(2);
        let h = Tensor::from_rows(&[vec![1.0], vec![-1.0]]).unwrap();
        let out = correlate_m2(&f, &h, &h).unwrap();
        assert!((out.at(&[0, 0]) - 0.880_797_077_977_882_3).abs() < 1e-12);
        assert!((out.at(&[0, 1]) - 0.119_202_922_022_117_6).abs() < 1e-12);
        assert!((out.at(&[1, 0]) - 0.119_202_922_022_117_6).abs() < 1e-12);
        assert!((out.at(&[1, 1]) - 0.880_797_077_977_882_3).abs() < 1e-12);
    }

    #[test]
    fn fuse_cases() {
        let ones = Tensor::ones(&[2, 2]);
        let rv = vec![ones.clone(), ones.map(|v| 2.0 * v)];
        let rs = Tensor::from_rows(&[vec![1.0, -1.0], vec![0.5, 3.0]]).unwrap();
        let only_visual = fuse_and_sum(&rv, &rs, 1.0, 0.0, false).unwrap();
        assert_eq!(only_visual, ones.map(|v| 3.0 * v));

        let five = vec![Tensor::zeros(&[2, 2]); 5];
        assert_eq!(fuse_and_sum(&five, &rs, 0.0, 1.0, false).unwrap(), rs.map(|v| 5.0 * v));
        assert_eq!(fuse_and_sum(&five, &rs, 0.0, 1.0, true).unwrap(), rs);

        let units = vec![ones.clone(), ones.clone()];
        assert_eq!(fuse_and_sum(&units, &ones, 0.5, 0.25, false).unwrap(), ones.map(|v| 1.5 * v));
    }

    #[test]
    fn fuse_rejects_bad_shapes() {
        let err = fuse_and_sum(&[Tensor::ones(&[2, 2])], &Tensor::ones(&[3, 3]), 1.0, 1.0, false).unwrap_err();
        assert_eq!(err.stage, Stage::Fusion);
        assert!(fuse_and_sum(&[], &Tensor::ones(&[3, 3]), 1.0, 1.0, false).is_err());
    }

    #[test]
    fn reference_count() {
        let cfg = CormConfig::reference();
        assert_eq!(param_count(&cfg), 57_574);
        assert_eq!(
            param_count(&cfg),
            (1024 * 32 + 32) + (65 + 65) + 2 * (32 + 1) + 2 * (768 * 16) + 2
        );
        let params = CormParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(params.count(), 57_574);
    }

    #[test]
    fn doubling_visual_width_adds_reduce_and_difference_maps() {
        let base = CormConfig::reference();
        let wide = CormConfig { dv: 64, ..base.clone() };
        // f grows by 1024*32 weights + 32 biases; phi and psi each grow by 32 weights.
        assert_eq!(param_count(&wide) - param_count(&base), 1024 * 32 + 32 + 2 * 32);
    }

    #[test]
    fn fusion_weights_always_contribute_two() {
        for (v, s) in [
            (CorrelationFn::M1, CorrelationFn::M1),
            (CorrelationFn::M2, CorrelationFn::M2),
            (CorrelationFn::M2, CorrelationFn::M1),
        ] {
            let cfg = CormConfig {
                vcor_fn: v,
                scor_fn: s,
                ..CormConfig::reference()
            };
            let params = CormParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            let fusion: usize = params
                .named()
                .iter()
                .filter(|(n, _)| n == "corm.alpha" || n == "corm.beta")
                .map(|(_, t)| t.len())
                .sum();
            assert_eq!(fusion, 2);
            assert_eq!(params.count(), param_count(&cfg));
        }
    }

    #[test]
    fn zero_dimension_rejected() {
        let cfg = CormConfig { d_k: 0, ..CormConfig::reference() };
        assert_eq!(cfg.validate().unwrap_err().stage, Stage::Config);
    }
}
