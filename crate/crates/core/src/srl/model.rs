use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{Architecture, EncoderSpec, LossKind, LossWeights, Method, SplitLayout, SrlError};
use crate::autodiff::layers::{Activation, ConvLayer, Init, Linear, Mlp};
use crate::autodiff::{spatial_soft_argmax, ParamGrads, ParamId, ParamStore, Tape, Tensor, Var};
use crate::dataset::{NormStats, TransitionRecord};
use crate::envs::{Image, NavConfig, NUM_ACTIONS};
use crate::rng::stream_rng;

pub const DECODER_HIDDEN: usize = 64;
pub const REWARD_HIDDEN: [usize; 2] = [16, 16];
/// Rewards `-1, 0, +1` map to classes `0, 1, 2`.
pub const NUM_REWARD_CLASSES: usize = 3;

pub fn reward_class(reward: i8) -> usize {
    (reward as i32 + 1) as usize
}

/// Shared feature extractor followed by a linear projection to the state.
#[derive(Clone, Debug)]
struct Encoder {
    convs: Vec<ConvLayer>,
    dense: Vec<Linear>,
    projection: Linear,
    image_size: usize,
    keypoints: bool,
}

impl Encoder {
    fn new(
        store: &mut ParamStore,
        spec: &EncoderSpec,
        image_size: usize,
        trainable: bool,
        rng: &mut impl rand::Rng,
    ) -> Result<Self, SrlError> {
        let (conv_specs, hidden, keypoints) = match &spec.architecture {
            Architecture::Mlp { hidden } => (&[][..], hidden, false),
            Architecture::SmallCnn {
                convs,
                hidden,
                keypoints,
            } => (&convs[..], hidden, *keypoints && !convs.is_empty()),
        };
        let mut convs = Vec::new();
        let mut shape = (image_size, image_size, 3);
        for (i, c) in conv_specs.iter().enumerate() {
            if c.kernel == 0 || c.stride == 0 || c.out_channels == 0 || c.kernel > shape.0 {
                return Err(SrlError::Config(format!(
                    "conv layer {i} ({c:?}) does not fit a {}x{} input",
                    shape.0, shape.1
                )));
            }
            let layer = ConvLayer::new(
                store,
                &format!("encoder.conv.{i}"),
                shape,
                *c,
                trainable,
                rng,
            );
            shape = layer.out_shape();
            convs.push(layer);
        }
        let mut width = if keypoints {
            2 * shape.2
        } else {
            shape.0 * shape.1 * shape.2
        };
        let mut dense = Vec::new();
        for (i, &h) in hidden.iter().enumerate() {
            if h == 0 {
                return Err(SrlError::Config(
                    "hidden layer widths must be positive".into(),
                ));
            }
            dense.push(Linear::new(
                store,
                &format!("encoder.dense.{i}"),
                width,
                h,
                Init::He,
                trainable,
                rng,
            ));
            width = h;
        }
        let projection = Linear::new(
            store,
            "encoder.projection",
            width,
            spec.state_dim,
            Init::Glorot,
            trainable,
            rng,
        );
        Ok(Self {
            convs,
            dense,
            projection,
            image_size,
            keypoints,
        })
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, SrlError> {
        let rows = tape.value(x).shape()[0];
        let mut h = x;
        if !self.convs.is_empty() {
            let s = self.image_size;
            h = tape.reshape(h, vec![rows, s, s, 3])?;
            for c in &self.convs {
                h = c.forward(tape, store, h)?;
            }
            h = if self.keypoints {
                tape.spatial_soft_argmax(h)?
            } else {
                tape.flatten(h)?
            };
        }
        for d in &self.dense {
            h = d.forward(tape, store, h)?;
            h = tape.relu(h)?;
        }
        Ok(self.projection.forward(tape, store, h)?)
    }

    fn infer(&self, store: &ParamStore, rows: usize, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for c in &self.convs {
            h = c.infer(store, rows, &h);
        }
        if let (true, Some(last)) = (self.keypoints, self.convs.last()) {
            let (oh, ow, oc) = last.out_shape();
            h = spatial_soft_argmax(&h, rows, oh, ow, oc);
        }
        for d in &self.dense {
            h = d.infer(store, rows, &h);
            h.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        self.projection.infer(store, rows, &h)
    }

    fn trunk_params(&self) -> Vec<ParamId> {
        self.convs
            .iter()
            .flat_map(|c| [c.kernel, c.bias])
            .chain(self.dense.iter().flat_map(|d| [d.weight, d.bias]))
            .collect()
    }
}

#[derive(Clone, Debug, Default)]
struct Heads {
    decoder: Option<Mlp>,
    reward: Option<Mlp>,
    inverse: Option<Linear>,
    forward: Option<Linear>,
}

/// Inputs of one loss evaluation, with pixels already scaled to `[0, 1]`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub rows: usize,
    pub obs: Vec<f64>,
    pub next_obs: Option<Vec<f64>>,
    pub actions: Vec<usize>,
    pub reward_classes: Vec<usize>,
    pub gt: Vec<f64>,
    pub gt_dim: usize,
}

fn scale_pixels(out: &mut Vec<f64>, img: &Image) {
    out.extend(img.pixels().iter().map(|&p| p as f64 / 255.0));
}

impl Batch {
    pub fn from_records(records: &[&TransitionRecord], with_next: bool) -> Result<Self, SrlError> {
        let first = records.first().ok_or(SrlError::EmptyBatch)?;
        let rows = records.len();
        let obs_len = first.obs.pixels().len();
        let gt_dim = first.gt_state.len();
        let mut obs = Vec::with_capacity(rows * obs_len);
        let mut next = with_next.then(|| Vec::with_capacity(rows * obs_len));
        let mut gt = Vec::with_capacity(rows * gt_dim);
        for r in records {
            scale_pixels(&mut obs, &r.obs);
            if let Some(n) = next.as_mut() {
                scale_pixels(n, &r.next_obs);
            }
            gt.extend_from_slice(&r.gt_state);
        }
        Ok(Self {
            rows,
            obs,
            next_obs: next,
            actions: records.iter().map(|r| r.action as usize).collect(),
            reward_classes: records.iter().map(|r| reward_class(r.reward)).collect(),
            gt,
            gt_dim,
        })
    }

    fn obs_len(&self) -> usize {
        self.obs.len() / self.rows
    }
}

/// Total and per-loss values, all unweighted except `total`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub per_head: BTreeMap<LossKind, f64>,
}

/// Taped loss graph of one batch.
pub(crate) struct LossGraph {
    pub total: Var,
    pub heads: Vec<(LossKind, Var)>,
}

#[derive(Clone, Debug)]
pub struct SrlModel {
    method: Method,
    spec: EncoderSpec,
    layout: Option<SplitLayout>,
    weights: LossWeights,
    env: NavConfig,
    seed: u64,
    store: ParamStore,
    encoder: Option<Encoder>,
    heads: Heads,
    norm: NormStats,
    reward_class_weights: Option<Vec<f64>>,
}

impl SrlModel {
    /// Builds a model with parameters drawn deterministically from `seed`.
    /// The supervised baseline's state dimension is forced to the ground-truth
    /// dimension; passthroughs ignore `spec`.
    pub fn build(
        method: Method,
        spec: &EncoderSpec,
        layout: Option<SplitLayout>,
        weights: LossWeights,
        env: &NavConfig,
        seed: u64,
    ) -> Result<Self, SrlError> {
        env.validate()
            .map_err(|e| SrlError::Config(e.to_string()))?;
        let gt_dim = env.variant.gt_dim();
        let mut spec = spec.clone();
        match method {
            Method::Supervised => spec.state_dim = gt_dim,
            Method::GroundTruth => spec.state_dim = gt_dim,
            Method::RawPixels => spec.state_dim = env.obs_len(),
            _ => {}
        }
        if spec.state_dim == 0 {
            return Err(SrlError::Config("state_dim must be positive".into()));
        }
        let layout = check_layout(method, layout, spec.state_dim)?;
        let active = layout.as_ref().map(SplitLayout::losses).unwrap_or_default();
        weights.validate(&active)?;

        let mut store = ParamStore::new();
        let mut rng = stream_rng(seed, 0x5EED_0001);
        let encoder = if method.is_passthrough() {
            None
        } else {
            let trainable = method != Method::RandomFeatures;
            Some(Encoder::new(
                &mut store,
                &spec,
                env.image_size,
                trainable,
                &mut rng,
            )?)
        };
        let mut heads = Heads::default();
        if let Some(layout) = &layout {
            let width = |k| layout.range_of(k).map(|r: Range<usize>| r.len());
            if let Some(w) = width(LossKind::Reconstruction) {
                heads.decoder = Some(Mlp::new(
                    &mut store,
                    "decoder",
                    &[w, DECODER_HIDDEN, env.obs_len()],
                    Activation::Relu,
                    Init::Glorot,
                    true,
                    &mut rng,
                ));
            }
            if let Some(w) = width(LossKind::Reward) {
                heads.reward = Some(Mlp::new(
                    &mut store,
                    "reward_head",
                    &[
                        2 * w,
                        REWARD_HIDDEN[0],
                        REWARD_HIDDEN[1],
                        NUM_REWARD_CLASSES,
                    ],
                    Activation::Relu,
                    Init::Glorot,
                    true,
                    &mut rng,
                ));
            }
            if let Some(w) = width(LossKind::Inverse) {
                heads.inverse = Some(Linear::new(
                    &mut store,
                    "inverse_head",
                    2 * w,
                    NUM_ACTIONS,
                    Init::Glorot,
                    true,
                    &mut rng,
                ));
            }
            if let Some(w) = width(LossKind::Forward) {
                heads.forward = Some(Linear::new(
                    &mut store,
                    "forward_head",
                    w + NUM_ACTIONS,
                    w,
                    Init::Glorot,
                    true,
                    &mut rng,
                ));
            }
        }
        let norm = if method == Method::RawPixels {
            NormStats::pixel_scale()
        } else {
            NormStats::running(spec.state_dim)
        };
        Ok(Self {
            method,
            spec,
            layout,
            weights,
            env: env.clone(),
            seed,
            store,
            encoder,
            heads,
            norm,
            reward_class_weights: None,
        })
    }

    /// Builds from a grammar string (or the method's default layout) with
    /// default or explicit slice widths.
    pub fn build_with_grammar(
        method: Method,
        spec: &EncoderSpec,
        grammar: Option<&str>,
        widths: Option<&[usize]>,
        weights: LossWeights,
        env: &NavConfig,
        seed: u64,
    ) -> Result<Self, SrlError> {
        let grammar = match (grammar, method.default_layout()) {
            (Some(g), Some(_)) => Some(g),
            (Some(g), None) => {
                return Err(SrlError::Config(format!(
                    "method {} takes no layout, got {g:?}",
                    method.label()
                )))
            }
            (None, d) => d,
        };
        let layout = match (grammar, widths) {
            (Some(g), Some(w)) => Some(SplitLayout::parse_with_widths(g, w, spec.state_dim)?),
            (Some(g), None) => Some(SplitLayout::parse(g, spec.state_dim)?),
            (None, Some(_)) => {
                return Err(SrlError::Config(format!(
                    "method {} takes no split widths",
                    method.label()
                )))
            }
            (None, None) => None,
        };
        Self::build(method, spec, layout, weights, env, seed)
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn state_dim(&self) -> usize {
        self.spec.state_dim
    }

    pub fn layout(&self) -> Option<&SplitLayout> {
        self.layout.as_ref()
    }

    pub fn weights(&self) -> LossWeights {
        self.weights
    }

    pub fn env(&self) -> &NavConfig {
        &self.env
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn norm(&self) -> &NormStats {
        &self.norm
    }

    pub fn set_norm(&mut self, norm: NormStats) -> Result<(), SrlError> {
        if norm.mode != self.norm.mode || norm.dim() != self.norm.dim() {
            return Err(SrlError::Config(format!(
                "norm stats ({:?}, dim {}) do not match the model ({:?}, dim {})",
                norm.mode,
                norm.dim(),
                self.norm.mode,
                self.norm.dim()
            )));
        }
        self.norm = norm;
        Ok(())
    }

    pub fn reward_class_weights(&self) -> Option<&[f64]> {
        self.reward_class_weights.as_deref()
    }

    pub fn set_reward_class_weights(&mut self, w: Option<Vec<f64>>) {
        self.reward_class_weights = w;
    }

    /// Losses this model trains, in canonical order.
    pub fn active_losses(&self) -> Vec<LossKind> {
        match self.method {
            Method::Supervised => vec![LossKind::Supervised],
            _ => self
                .layout
                .as_ref()
                .map(SplitLayout::losses)
                .unwrap_or_default(),
        }
    }

    pub fn needs_next_state(&self) -> bool {
        self.active_losses().iter().any(|k| k.needs_next_state())
    }

    /// Projection layer producing the state vector.
    pub fn projection(&self) -> Option<&Linear> {
        self.encoder.as_ref().map(|e| &e.projection)
    }

    /// Parameters of the shared extractor (below the projection).
    pub fn trunk_params(&self) -> Vec<ParamId> {
        self.encoder
            .as_ref()
            .map(Encoder::trunk_params)
            .unwrap_or_default()
    }

    /// Parameters of the head serving `kind`.
    pub fn head_params(&self, kind: LossKind) -> Vec<ParamId> {
        let mlp = |m: &Option<Mlp>| {
            m.iter()
                .flat_map(|m| m.layers.iter().flat_map(|l| [l.weight, l.bias]))
                .collect()
        };
        let lin = |l: &Option<Linear>| l.iter().flat_map(|l| [l.weight, l.bias]).collect();
        match kind {
            LossKind::Reconstruction => mlp(&self.heads.decoder),
            LossKind::Reward => mlp(&self.heads.reward),
            LossKind::Inverse => lin(&self.heads.inverse),
            LossKind::Forward => lin(&self.heads.forward),
            LossKind::Supervised => Vec::new(),
        }
    }

    /// Ids of every parameter that feeds the state vector.
    pub fn encoder_params(&self) -> Vec<ParamId> {
        let mut ids = self.trunk_params();
        if let Some(p) = self.projection() {
            ids.extend([p.weight, p.bias]);
        }
        ids
    }

    pub(crate) fn loss_graph(&self, tape: &mut Tape, batch: &Batch) -> Result<LossGraph, SrlError> {
        let encoder = self.encoder.as_ref().ok_or(SrlError::NotLearned {
            method: self.method.label(),
        })?;
        let active = self.active_losses();
        if active.is_empty() || self.method == Method::RandomFeatures {
            return Err(SrlError::NotLearned {
                method: self.method.label(),
            });
        }
        let obs_len = self.env.obs_len();
        if batch.obs_len() != obs_len {
            return Err(SrlError::ObservationShape {
                expected: obs_len,
                found: batch.obs_len(),
            });
        }
        let m = batch.rows;
        let x = tape.constant(Tensor::matrix(m, obs_len, batch.obs.clone())?);
        let s = encoder.forward(tape, &self.store, x)?;
        let s_next = if active.iter().any(|k| k.needs_next_state()) {
            let next = batch.next_obs.as_ref().ok_or_else(|| {
                SrlError::Config("reward, inverse and forward losses need next observations".into())
            })?;
            let xn = tape.constant(Tensor::matrix(m, obs_len, next.clone())?);
            Some(encoder.forward(tape, &self.store, xn)?)
        } else {
            None
        };

        let mut heads = Vec::new();
        for kind in active {
            let range = match kind {
                LossKind::Supervised => 0..self.spec.state_dim,
                k => self
                    .layout
                    .as_ref()
                    .and_then(|l| l.range_of(k))
                    .expect("active loss has a slice"),
            };
            let cur = tape.slice(s, range.start, range.end)?;
            let next = match s_next {
                Some(sn) if kind.needs_next_state() => {
                    Some(tape.slice(sn, range.start, range.end)?)
                }
                _ => None,
            };
            let loss = match kind {
                LossKind::Reconstruction => {
                    let dec = self.heads.decoder.as_ref().expect("decoder built");
                    let recon = dec.forward(tape, &self.store, cur)?;
                    tape.mse(recon, x)?
                }
                LossKind::Reward => {
                    let head = self.heads.reward.as_ref().expect("reward head built");
                    let pair = tape.concat(&[cur, next.unwrap()])?;
                    let logits = head.forward(tape, &self.store, pair)?;
                    match &self.reward_class_weights {
                        Some(w) => tape.weighted_cross_entropy(logits, &batch.reward_classes, w)?,
                        None => tape.softmax_cross_entropy(logits, &batch.reward_classes)?,
                    }
                }
                LossKind::Inverse => {
                    let head = self.heads.inverse.as_ref().expect("inverse head built");
                    let pair = tape.concat(&[cur, next.unwrap()])?;
                    let logits = head.forward(tape, &self.store, pair)?;
                    tape.softmax_cross_entropy(logits, &batch.actions)?
                }
                LossKind::Forward => {
                    let head = self.heads.forward.as_ref().expect("forward head built");
                    let mut onehot = vec![0.0; m * NUM_ACTIONS];
                    for (r, &a) in batch.actions.iter().enumerate() {
                        onehot[r * NUM_ACTIONS + a] = 1.0;
                    }
                    let a = tape.constant(Tensor::matrix(m, NUM_ACTIONS, onehot)?);
                    let input = tape.concat(&[cur, a])?;
                    let pred = head.forward(tape, &self.store, input)?;
                    let target =
                        tape.constant(tape.value(next.unwrap()).clone().with_requires_grad(false));
                    tape.mse(pred, target)?
                }
                LossKind::Supervised => {
                    let gt = tape.constant(Tensor::matrix(m, batch.gt_dim, batch.gt.clone())?);
                    tape.mse(cur, gt)?
                }
            };
            heads.push((kind, loss));
        }
        let mut total: Option<Var> = None;
        for &(kind, loss) in &heads {
            let weighted = tape.scale(loss, self.weights.get(kind))?;
            total = Some(match total {
                Some(t) => tape.add(t, weighted)?,
                None => weighted,
            });
        }
        Ok(LossGraph {
            total: total.expect("at least one loss"),
            heads,
        })
    }

    /// Evaluates the weighted total and each unweighted loss on a batch.
    pub fn loss(&self, batch: &Batch) -> Result<LossValues, SrlError> {
        let mut tape = Tape::new();
        let g = self.loss_graph(&mut tape, batch)?;
        Ok(LossValues {
            total: tape.value(g.total).item(),
            per_head: g
                .heads
                .iter()
                .map(|&(k, v)| (k, tape.value(v).item()))
                .collect(),
        })
    }

    /// Gradient of the weighted total, plus the loss values.
    pub fn gradients(&self, batch: &Batch) -> Result<(LossValues, ParamGrads), SrlError> {
        let mut tape = Tape::new();
        let g = self.loss_graph(&mut tape, batch)?;
        let values = LossValues {
            total: tape.value(g.total).item(),
            per_head: g
                .heads
                .iter()
                .map(|&(k, v)| (k, tape.value(v).item()))
                .collect(),
        };
        let grads = tape.backward(g.total)?;
        Ok((values, grads))
    }

    /// Gradient of a single unweighted loss.
    pub fn head_gradients(&self, batch: &Batch, kind: LossKind) -> Result<ParamGrads, SrlError> {
        let mut tape = Tape::new();
        let g = self.loss_graph(&mut tape, batch)?;
        let (_, var) = g
            .heads
            .iter()
            .find(|(k, _)| *k == kind)
            .copied()
            .ok_or_else(|| SrlError::Config(format!("loss {} is not active", kind.token())))?;
        Ok(tape.backward(var)?)
    }

    /// Un-normalized state of one observation.
    pub fn encode(&self, obs: &Image, gt_state: &[f64]) -> Result<Vec<f64>, SrlError> {
        self.encode_batch(&[obs], &[gt_state])
    }

    /// Row-major states of many observations.
    pub fn encode_batch(&self, obs: &[&Image], gt_states: &[&[f64]]) -> Result<Vec<f64>, SrlError> {
        match self.method {
            Method::GroundTruth => {
                let d = self.spec.state_dim;
                let mut out = Vec::with_capacity(gt_states.len() * d);
                for g in gt_states {
                    if g.len() != d {
                        return Err(SrlError::ObservationShape {
                            expected: d,
                            found: g.len(),
                        });
                    }
                    out.extend_from_slice(g);
                }
                Ok(out)
            }
            _ => {
                let obs_len = self.env.obs_len();
                let mut x = Vec::with_capacity(obs.len() * obs_len);
                for o in obs {
                    if o.pixels().len() != obs_len {
                        return Err(SrlError::ObservationShape {
                            expected: obs_len,
                            found: o.pixels().len(),
                        });
                    }
                    scale_pixels(&mut x, o);
                }
                match &self.encoder {
                    Some(e) => Ok(e.infer(&self.store, obs.len(), &x)),
                    None => Ok(x),
                }
            }
        }
    }

    /// Policy input: the encoded state passed through the frozen running
    /// normalizer (raw pixels are only scaled to `[0, 1]`).
    pub fn features(&self, obs: &Image, gt_state: &[f64]) -> Result<Vec<f64>, SrlError> {
        self.features_batch(&[obs], &[gt_state])
    }

    pub fn features_batch(
        &self,
        obs: &[&Image],
        gt_states: &[&[f64]],
    ) -> Result<Vec<f64>, SrlError> {
        let mut s = self.encode_batch(obs, gt_states)?;
        if self.method != Method::RawPixels {
            self.norm.normalize_in_place(&mut s);
        }
        Ok(s)
    }

    /// Refits the running normalizer on the encoded states of `records`.
    pub fn fit_norm(&mut self, records: &[TransitionRecord]) -> Result<(), SrlError> {
        if self.method == Method::RawPixels {
            return Ok(());
        }
        let mut norm = NormStats::running(self.spec.state_dim);
        for chunk in records.chunks(256) {
            let obs: Vec<&Image> = chunk.iter().map(|r| &r.obs).collect();
            let gts: Vec<&[f64]> = chunk.iter().map(|r| r.gt_state.as_slice()).collect();
            norm.update(&self.encode_batch(&obs, &gts)?)?;
        }
        self.norm = norm;
        Ok(())
    }
}

/// Checks that the layout fits the method and the state dimension.
fn check_layout(
    method: Method,
    layout: Option<SplitLayout>,
    state_dim: usize,
) -> Result<Option<SplitLayout>, SrlError> {
    match (method, layout) {
        (Method::SrlSplits, Some(l)) => {
            l.validate(state_dim)?;
            Ok(Some(l))
        }
        (Method::SrlCombination, Some(l)) => {
            l.validate(state_dim)?;
            if l.entries.len() != 1 {
                return Err(SrlError::Layout(format!(
                    "srl_combination needs a single shared slice, got {l}"
                )));
            }
            Ok(Some(l))
        }
        (Method::Autoencoder, Some(l)) => {
            l.validate(state_dim)?;
            if l.losses() != [LossKind::Reconstruction] {
                return Err(SrlError::Layout(format!(
                    "autoencoder layout must be AE, got {l}"
                )));
            }
            Ok(Some(l))
        }
        (Method::SrlSplits | Method::SrlCombination | Method::Autoencoder, None) => {
            let grammar = method.default_layout().expect("learned method");
            Ok(Some(SplitLayout::parse(grammar, state_dim)?))
        }
        (m, Some(l)) => Err(SrlError::Layout(format!(
            "method {} takes no layout, got {l}",
            m.label()
        ))),
        (_, None) => Ok(None),
    }
}

/// Inverse-frequency weights over reward classes (zero for absent classes).
pub(crate) fn inverse_frequency(records: &[&TransitionRecord]) -> Vec<f64> {
    let mut counts = [0usize; NUM_REWARD_CLASSES];
    for r in records {
        counts[reward_class(r.reward)] += 1;
    }
    let n = records.len() as f64;
    counts
        .iter()
        .map(|&c| {
            if c == 0 {
                0.0
            } else {
                n / (NUM_REWARD_CLASSES as f64 * c as f64)
            }
        })
        .collect()
}
