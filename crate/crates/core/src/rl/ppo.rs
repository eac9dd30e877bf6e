use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::gae::{compute_gae, normalize_advantages};
use super::policy::{sample, ActorCritic};
use super::{PpoConfig, RlError};
use crate::autodiff::{log_softmax, OptimizerState, ParamStore, Tape, Tensor, Var};
use crate::envs::{NavConfig, NavEnv, StepResult, NUM_ACTIONS};
use crate::rng::mix_seed;
use crate::srl::SrlModel;

/// Fixed-length trajectory segment; every array has one entry per step.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutBuffer {
    pub input_len: usize,
    /// Row-major `[len, input_len]` policy inputs.
    pub states: Vec<f64>,
    pub actions: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub dones: Vec<bool>,
    /// Value of the state following the last step.
    pub bootstrap_value: f64,
}

impl RolloutBuffer {
    pub fn new(input_len: usize) -> Self {
        Self {
            input_len,
            states: Vec::new(),
            actions: Vec::new(),
            log_probs: Vec::new(),
            rewards: Vec::new(),
            values: Vec::new(),
            dones: Vec::new(),
            bootstrap_value: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn state(&self, t: usize) -> &[f64] {
        &self.states[t * self.input_len..(t + 1) * self.input_len]
    }
}

/// A training environment that persists across rollouts and resets itself
/// with per-episode seeds when an episode ends.
pub struct EnvCursor {
    env: NavEnv,
    current: StepResult,
    seed: u64,
    episodes: u64,
}

impl EnvCursor {
    pub fn new(config: &NavConfig, seed: u64) -> Result<Self, RlError> {
        let mut env = NavEnv::new(config.clone())?;
        let current = env.reset(mix_seed(seed, 0));
        Ok(Self {
            env,
            current,
            seed,
            episodes: 1,
        })
    }

    pub fn episodes_started(&self) -> u64 {
        self.episodes
    }
}

/// Samples `horizon` steps from the stochastic policy, resetting finished
/// episodes inline.
pub fn collect_rollout(
    encoder: &SrlModel,
    policy: &ActorCritic,
    store: &ParamStore,
    cursor: &mut EnvCursor,
    horizon: usize,
    rng: &mut impl Rng,
) -> Result<RolloutBuffer, RlError> {
    let mut buf = RolloutBuffer::new(policy.input.len());
    buf.states.reserve(horizon * buf.input_len);
    for _ in 0..horizon {
        let x = encoder.features(&cursor.current.observation, &cursor.current.gt_state)?;
        let (logits, value) = policy.infer(store, 1, &x);
        let action = sample(&logits, rng);
        let logp = log_softmax(&logits)[action];
        let next = cursor.env.step(action)?;
        buf.states.extend_from_slice(&x);
        buf.actions.push(action);
        buf.log_probs.push(logp);
        buf.rewards.push(next.reward as f64);
        buf.values.push(value[0]);
        buf.dones.push(next.done);
        cursor.current = if next.done {
            cursor.episodes += 1;
            cursor.env.reset(mix_seed(cursor.seed, cursor.episodes - 1))
        } else {
            next
        };
    }
    let x = encoder.features(&cursor.current.observation, &cursor.current.gt_state)?;
    buf.bootstrap_value = policy.infer(store, 1, &x).1[0];
    Ok(buf)
}

/// Policy objective variant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Surrogate {
    /// `min(r A, clip(r, 1 - eps, 1 + eps) A)`.
    Clipped(f64),
    /// Plain importance-weighted policy gradient `r A`.
    Vanilla,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub minibatches: usize,
}

pub(crate) struct LossParts {
    pub total: Var,
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
}

/// Taped PPO loss of one minibatch:
/// `-mean(surrogate) + value_coef * mse(V, returns) - entropy_coef * entropy`.
/// `advantages` are used as given (normalize them first).
#[allow(clippy::too_many_arguments)]
pub fn surrogate_loss(
    tape: &mut Tape,
    policy: &ActorCritic,
    store: &ParamStore,
    states: &[f64],
    actions: &[usize],
    old_log_probs: &[f64],
    advantages: &[f64],
    returns: &[f64],
    surrogate: Surrogate,
    value_coef: f64,
    entropy_coef: f64,
) -> Result<Var, RlError> {
    Ok(loss_parts(
        tape,
        policy,
        store,
        states,
        actions,
        old_log_probs,
        advantages,
        returns,
        surrogate,
        value_coef,
        entropy_coef,
    )?
    .total)
}

#[allow(clippy::too_many_arguments)]
fn loss_parts(
    tape: &mut Tape,
    policy: &ActorCritic,
    store: &ParamStore,
    states: &[f64],
    actions: &[usize],
    old_log_probs: &[f64],
    advantages: &[f64],
    returns: &[f64],
    surrogate: Surrogate,
    value_coef: f64,
    entropy_coef: f64,
) -> Result<LossParts, RlError> {
    let m = actions.len();
    let x = tape.constant(Tensor::matrix(m, states.len() / m, states.to_vec())?);
    let (logits, values) = policy.forward(tape, store, x)?;
    let logp_all = tape.log_softmax(logits)?;
    let logp = tape.gather(logp_all, actions)?;
    let old = tape.constant(Tensor::vector(old_log_probs.to_vec())?);
    let diff = tape.sub(logp, old)?;
    let ratio = tape.exp(diff)?;
    let adv = tape.constant(Tensor::vector(advantages.to_vec())?);
    let surr1 = tape.mul(ratio, adv)?;
    let objective = match surrogate {
        Surrogate::Clipped(eps) => {
            let clipped = tape.clamp(ratio, 1.0 - eps, 1.0 + eps)?;
            let surr2 = tape.mul(clipped, adv)?;
            tape.minimum(surr1, surr2)?
        }
        Surrogate::Vanilla => surr1,
    };
    let mean_obj = tape.mean(objective)?;
    let policy_loss = tape.scale(mean_obj, -1.0)?;
    let v = tape.reshape(values, vec![m])?;
    let ret = tape.constant(Tensor::vector(returns.to_vec())?);
    let value_loss = tape.mse(v, ret)?;
    let weighted_v = tape.scale(value_loss, value_coef)?;
    let mut total = tape.add(policy_loss, weighted_v)?;

    let ratios = tape.value(ratio).data().to_vec();
    let logp_new = tape.value(logp).data().to_vec();
    let probs_logp: Vec<f64> = {
        let la = tape.value(logp_all).data();
        la.chunks(NUM_ACTIONS)
            .map(|row| -row.iter().map(|l| l.exp() * l).sum::<f64>())
            .collect()
    };
    let entropy = probs_logp.iter().sum::<f64>() / m as f64;
    if entropy_coef != 0.0 {
        let p = tape.softmax(logits)?;
        let plogp = tape.mul(p, logp_all)?;
        let s = tape.sum(plogp)?;
        // sum(p log p) / m = -entropy
        let ent_term = tape.scale(s, entropy_coef / m as f64)?;
        total = tape.add(total, ent_term)?;
    }
    let eps = match surrogate {
        Surrogate::Clipped(e) => e,
        Surrogate::Vanilla => f64::INFINITY,
    };
    let clip_fraction = ratios.iter().filter(|r| (*r - 1.0).abs() > eps).count() as f64 / m as f64;
    let approx_kl = old_log_probs
        .iter()
        .zip(&logp_new)
        .map(|(o, n)| o - n)
        .sum::<f64>()
        / m as f64;
    Ok(LossParts {
        policy: tape.value(policy_loss).item(),
        value: tape.value(value_loss).item(),
        entropy,
        clip_fraction,
        approx_kl,
        total,
    })
}

/// Runs `cfg.epochs` passes of shuffled minibatch updates over the buffer.
/// Advantages are normalized per minibatch.
pub fn ppo_update(
    policy: &ActorCritic,
    store: &mut ParamStore,
    optimizer: &mut OptimizerState,
    buffer: &RolloutBuffer,
    cfg: &PpoConfig,
    surrogate: Surrogate,
    rng: &mut impl Rng,
) -> Result<UpdateStats, RlError> {
    let n = buffer.len();
    if n == 0 {
        return Ok(UpdateStats::default());
    }
    let (adv, returns) = compute_gae(
        &buffer.rewards,
        &buffer.values,
        &buffer.dones,
        buffer.bootstrap_value,
        cfg.gamma,
        cfg.gae_lambda,
    );
    let mut stats = UpdateStats::default();
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for idx in order.chunks(cfg.minibatch_size) {
            let mut states = Vec::with_capacity(idx.len() * buffer.input_len);
            for &i in idx {
                states.extend_from_slice(buffer.state(i));
            }
            let actions: Vec<usize> = idx.iter().map(|&i| buffer.actions[i]).collect();
            let old: Vec<f64> = idx.iter().map(|&i| buffer.log_probs[i]).collect();
            let mut a: Vec<f64> = idx.iter().map(|&i| adv[i]).collect();
            normalize_advantages(&mut a);
            let r: Vec<f64> = idx.iter().map(|&i| returns[i]).collect();
            let grads = {
                let mut tape = Tape::new();
                let parts = loss_parts(
                    &mut tape,
                    policy,
                    store,
                    &states,
                    &actions,
                    &old,
                    &a,
                    &r,
                    surrogate,
                    cfg.value_coef,
                    cfg.entropy_coef,
                )
                .map_err(|e| match e {
                    RlError::Autodiff(inner) => RlError::NonFinite {
                        stats: format!("{inner}; running stats {stats:?}"),
                    },
                    other => other,
                })?;
                if !tape.value(parts.total).item().is_finite() {
                    return Err(RlError::NonFinite {
                        stats: format!("{stats:?}"),
                    });
                }
                stats.policy_loss += parts.policy;
                stats.value_loss += parts.value;
                stats.entropy += parts.entropy;
                stats.clip_fraction += parts.clip_fraction;
                stats.approx_kl += parts.approx_kl;
                stats.minibatches += 1;
                tape.backward(parts.total)?
            };
            store.zero_grad();
            store.accumulate(&grads)?;
            optimizer.step(store)?;
        }
    }
    let k = stats.minibatches.max(1) as f64;
    stats.policy_loss /= k;
    stats.value_loss /= k;
    stats.entropy /= k;
    stats.clip_fraction /= k;
    stats.approx_kl /= k;
    Ok(stats)
}
