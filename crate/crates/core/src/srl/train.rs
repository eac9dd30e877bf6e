use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::model::inverse_frequency;
use super::{
    Batch, EncoderSpec, LossKind, LossValues, LossWeights, Method, SplitLayout, SrlError, SrlModel,
};
use crate::autodiff::{load_checkpoint, save_checkpoint, AutodiffError, OptimizerConfig};
use crate::dataset::{DatasetView, NormStats, TransitionRecord};
use crate::envs::NavConfig;
use crate::rng::stream_rng;

pub const SIDECAR_VERSION: u32 = 1;
const EVAL_BATCH: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Weight reward classes by inverse training-set frequency.
    pub reward_class_weighting: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            optimizer: OptimizerConfig::default(),
            reward_class_weighting: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    /// 1-based.
    pub epoch: usize,
    pub train: LossValues,
    pub val: LossValues,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SrlTrainReport {
    pub method: Method,
    pub epochs: Vec<EpochLosses>,
    /// Epoch whose parameters were kept (minimum validation total).
    pub selected_epoch: Option<usize>,
    pub norm: NormStats,
    pub train_samples: usize,
    pub val_samples: usize,
    pub wall_clock_secs: f64,
}

impl SrlTrainReport {
    pub fn selected(&self) -> Option<&EpochLosses> {
        let e = self.selected_epoch?;
        self.epochs.iter().find(|l| l.epoch == e)
    }
}

/// Running mean of loss values weighted by batch size.
#[derive(Default)]
struct LossMeter {
    rows: usize,
    total: f64,
    heads: BTreeMap<LossKind, f64>,
}

impl LossMeter {
    fn add(&mut self, v: &LossValues, rows: usize) {
        self.rows += rows;
        self.total += v.total * rows as f64;
        for (&k, &x) in &v.per_head {
            *self.heads.entry(k).or_default() += x * rows as f64;
        }
    }

    fn mean(&self) -> LossValues {
        let n = self.rows.max(1) as f64;
        LossValues {
            total: self.total / n,
            per_head: self.heads.iter().map(|(&k, &x)| (k, x / n)).collect(),
        }
    }
}

fn non_finite(epoch: usize, batch: usize, e: SrlError, last: Option<&LossValues>) -> SrlError {
    match e {
        SrlError::Autodiff(AutodiffError::NonFinite { op }) => SrlError::NonFinite {
            epoch,
            batch,
            detail: format!("non-finite value in {op}; last losses {last:?}"),
        },
        other => other,
    }
}

/// Mean losses over `records` without updating anything.
pub fn evaluate(model: &SrlModel, records: &[TransitionRecord]) -> Result<LossValues, SrlError> {
    let with_next = model.needs_next_state();
    let mut meter = LossMeter::default();
    for chunk in records.chunks(EVAL_BATCH) {
        let refs: Vec<&TransitionRecord> = chunk.iter().collect();
        let batch = Batch::from_records(&refs, with_next)?;
        meter.add(&model.loss(&batch)?, chunk.len());
    }
    Ok(meter.mean())
}

/// Trains a learned model with minibatch descent, keeping the parameters of
/// the epoch with the lowest validation loss, then fits the running
/// normalizer on the training set. Non-learned methods only fit the
/// normalizer.
pub fn train(
    model: &mut SrlModel,
    train_set: DatasetView<'_>,
    val_set: DatasetView<'_>,
    opts: &TrainOptions,
) -> Result<SrlTrainReport, SrlError> {
    let started = Instant::now();
    if train_set.is_empty() {
        return Err(SrlError::EmptyBatch);
    }
    let mut epochs = Vec::new();
    let mut selected = None;
    if model.method().is_trained() {
        if val_set.is_empty() {
            return Err(SrlError::Config("validation set is empty".into()));
        }
        if opts.epochs == 0 || opts.batch_size == 0 {
            return Err(SrlError::Config(
                "epochs and batch_size must be positive".into(),
            ));
        }
        let refs: Vec<&TransitionRecord> = train_set.records.iter().collect();
        if opts.reward_class_weighting && model.active_losses().contains(&LossKind::Reward) {
            model.set_reward_class_weights(Some(inverse_frequency(&refs)));
        }
        let with_next = model.needs_next_state();
        let mut optimizer = opts.optimizer.build();
        let mut best: Option<(f64, crate::autodiff::ParamStore)> = None;
        let mut order: Vec<usize> = (0..refs.len()).collect();
        for epoch in 1..=opts.epochs {
            let mut rng = stream_rng(model.seed(), 0x7EA1_0000 + epoch as u64);
            order.shuffle(&mut rng);
            let mut meter = LossMeter::default();
            let mut last = None;
            for (b, idx) in order.chunks(opts.batch_size).enumerate() {
                let recs: Vec<&TransitionRecord> = idx.iter().map(|&i| refs[i]).collect();
                let batch = Batch::from_records(&recs, with_next)?;
                let (values, grads) = model
                    .gradients(&batch)
                    .map_err(|e| non_finite(epoch, b, e, last.as_ref()))?;
                if !values.total.is_finite() {
                    return Err(SrlError::NonFinite {
                        epoch,
                        batch: b,
                        detail: format!("losses {:?}", values.per_head),
                    });
                }
                let store = model.store_mut();
                store.zero_grad();
                store.accumulate(&grads)?;
                optimizer.step(store)?;
                meter.add(&values, recs.len());
                last = Some(values);
            }
            let val = evaluate(model, val_set.records)
                .map_err(|e| non_finite(epoch, usize::MAX, e, last.as_ref()))?;
            if best.as_ref().is_none_or(|(v, _)| val.total < *v) {
                best = Some((val.total, model.store().snapshot()));
                selected = Some(epoch);
            }
            epochs.push(EpochLosses {
                epoch,
                train: meter.mean(),
                val,
            });
        }
        if let Some((_, store)) = best {
            *model.store_mut() = store;
        }
    }
    model.fit_norm(train_set.records)?;
    Ok(SrlTrainReport {
        method: model.method(),
        epochs,
        selected_epoch: selected,
        norm: model.norm().clone(),
        train_samples: train_set.len(),
        val_samples: val_set.len(),
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

/// JSON written next to an SRL checkpoint; enough to rebuild the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SrlSidecar {
    pub format_version: u32,
    pub method: Method,
    pub encoder: EncoderSpec,
    pub layout: Option<SplitLayout>,
    /// Canonical grammar of `layout`, for reading.
    pub layout_grammar: Option<String>,
    pub weights: LossWeights,
    pub env: NavConfig,
    pub seed: u64,
    pub norm: NormStats,
    pub reward_class_weights: Option<Vec<f64>>,
    pub param_hash: String,
    pub report: Option<SrlTrainReport>,
}

impl SrlSidecar {
    pub fn describe(model: &SrlModel, report: Option<&SrlTrainReport>) -> Self {
        Self {
            format_version: SIDECAR_VERSION,
            method: model.method(),
            encoder: model.spec().clone(),
            layout: model.layout().cloned(),
            layout_grammar: model.layout().map(SplitLayout::grammar),
            weights: model.weights(),
            env: model.env().clone(),
            seed: model.seed(),
            norm: model.norm().clone(),
            reward_class_weights: model.reward_class_weights().map(<[f64]>::to_vec),
            param_hash: model.store().content_hash(),
            report: report.cloned(),
        }
    }
}

/// Writes the parameter checkpoint and its JSON sidecar.
pub fn save_model(
    model: &SrlModel,
    report: Option<&SrlTrainReport>,
    checkpoint: impl AsRef<Path>,
    sidecar: impl AsRef<Path>,
) -> Result<(), SrlError> {
    save_checkpoint(model.store(), checkpoint)?;
    let json = serde_json::to_string_pretty(&SrlSidecar::describe(model, report))
        .map_err(|e| SrlError::Sidecar(e.to_string()))?;
    std::fs::write(sidecar, json + "\n")?;
    Ok(())
}

/// Rebuilds a model from a checkpoint and sidecar.
pub fn load_model(
    checkpoint: impl AsRef<Path>,
    sidecar: impl AsRef<Path>,
) -> Result<(SrlModel, SrlSidecar), SrlError> {
    let text = std::fs::read_to_string(sidecar)?;
    let meta: SrlSidecar =
        serde_json::from_str(&text).map_err(|e| SrlError::Sidecar(e.to_string()))?;
    if meta.format_version != SIDECAR_VERSION {
        return Err(SrlError::Sidecar(format!(
            "sidecar version {} is not supported (expected {SIDECAR_VERSION})",
            meta.format_version
        )));
    }
    let mut model = SrlModel::build(
        meta.method,
        &meta.encoder,
        meta.layout.clone(),
        meta.weights,
        &meta.env,
        meta.seed,
    )?;
    let stored = load_checkpoint(checkpoint)?;
    model.store_mut().load_values(&stored)?;
    model.set_norm(meta.norm.clone())?;
    model.set_reward_class_weights(meta.reward_class_weights.clone());
    if model.store().content_hash() != meta.param_hash {
        return Err(SrlError::Sidecar(
            "checkpoint does not match the sidecar's parameter hash".into(),
        ));
    }
    Ok((model, meta))
}
