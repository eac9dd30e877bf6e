use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::policy::{ActorCritic, PolicyAgent, PolicyInput};
use super::ppo::{collect_rollout, ppo_update, EnvCursor, Surrogate, UpdateStats};
use super::{PpoConfig, RlError};
use crate::autodiff::{OptimizerConfig, ParamStore};
use crate::envs::NavConfig;
use crate::metrics::{evaluate_policy, EvalResult};
use crate::rng::{mix_seed, stream_rng};
use crate::srl::SrlModel;

const INIT_STREAM: u64 = 0x5EED_0002;
const SAMPLE_STREAM: u64 = 0x5A3F_0000;
const SHUFFLE_STREAM: u64 = 0x5AFF_0000;
const TRAIN_ENV_STREAM: u64 = 0x7A11_0000;
const EVAL_STREAM: u64 = 0xE7A1;
const EVAL_SAMPLE_STREAM: u64 = 0xE7A1_5A3F;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub timesteps: u64,
    pub eval: EvalResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingCurve {
    pub seed: u64,
    pub method: String,
    pub env: String,
    pub points: Vec<CurvePoint>,
}

/// Outcome of one policy training run.
pub struct RlRun {
    pub curve: TrainingCurve,
    pub store: ParamStore,
    pub policy: ActorCritic,
    /// One entry per rollout.
    pub updates: Vec<UpdateStats>,
}

fn evaluate(
    encoder: &SrlModel,
    policy: &ActorCritic,
    store: &ParamStore,
    env: &NavConfig,
    cfg: &PpoConfig,
    seed: u64,
    timesteps: u64,
) -> Result<CurvePoint, RlError> {
    let mut agent = PolicyAgent {
        encoder,
        policy,
        store,
        sampler: cfg
            .stochastic_eval
            .then(|| stream_rng(seed, EVAL_SAMPLE_STREAM + timesteps)),
    };
    let mut eval = evaluate_policy(
        &mut agent,
        env,
        cfg.eval_episodes,
        mix_seed(seed, EVAL_STREAM),
    )?;
    eval.budget_timesteps = timesteps;
    Ok(CurvePoint { timesteps, eval })
}

/// Trains a fresh actor-critic on the frozen `encoder` for
/// `cfg.total_timesteps` environment steps, evaluating at every checkpoint
/// inside the budget. Rollouts are cut short so checkpoints land exactly.
/// With no checkpoint in the budget the curve holds one evaluation of the
/// untrained policy at timestep 0.
pub fn train_rl(
    encoder: &SrlModel,
    env: &NavConfig,
    cfg: &PpoConfig,
    seed: u64,
) -> Result<RlRun, RlError> {
    cfg.validate()?;
    env.validate()?;
    let mut store = ParamStore::new();
    let policy = ActorCritic::new(
        &mut store,
        PolicyInput::for_model(encoder),
        cfg,
        &mut stream_rng(seed, INIT_STREAM),
    );
    let mut optimizer = OptimizerConfig::adam(cfg.learning_rate).build();
    let mut sample_rng = stream_rng(seed, SAMPLE_STREAM);
    let mut shuffle_rng = stream_rng(seed, SHUFFLE_STREAM);
    let mut cursor = EnvCursor::new(env, mix_seed(seed, TRAIN_ENV_STREAM))?;

    let checkpoints = cfg.active_checkpoints();
    let mut points = Vec::new();
    let mut updates = Vec::new();
    if checkpoints.is_empty() {
        points.push(evaluate(encoder, &policy, &store, env, cfg, seed, 0)?);
    }
    let mut t = 0u64;
    let mut stops = checkpoints.clone();
    if stops.last() != Some(&cfg.total_timesteps) {
        stops.push(cfg.total_timesteps);
    }
    for stop in stops {
        while t < stop {
            let n = (stop - t).min(cfg.horizon as u64) as usize;
            let buffer =
                collect_rollout(encoder, &policy, &store, &mut cursor, n, &mut sample_rng)?;
            updates.push(ppo_update(
                &policy,
                &mut store,
                &mut optimizer,
                &buffer,
                cfg,
                Surrogate::Clipped(cfg.clip_range),
                &mut shuffle_rng,
            )?);
            t += n as u64;
        }
        if checkpoints.contains(&stop) {
            points.push(evaluate(encoder, &policy, &store, env, cfg, seed, stop)?);
        }
    }
    Ok(RlRun {
        curve: TrainingCurve {
            seed,
            method: encoder.method().label().to_string(),
            env: env.variant.label().to_string(),
            points,
        },
        store,
        policy,
        updates,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct CurveRow {
    timesteps: u64,
    mean_reward: f64,
    std_error: f64,
    seed: u64,
    method: String,
    env: String,
}

pub fn write_curves_csv<W: Write>(w: W, curves: &[TrainingCurve]) -> Result<(), RlError> {
    let mut out = csv::Writer::from_writer(w);
    for c in curves {
        for p in &c.points {
            out.serialize(CurveRow {
                timesteps: p.timesteps,
                mean_reward: p.eval.mean_reward,
                std_error: p.eval.std_error,
                seed: c.seed,
                method: c.method.clone(),
                env: c.env.clone(),
            })?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads curves back, grouping consecutive rows with the same seed, method
/// and env. Per-episode rewards are not stored in the CSV.
pub fn read_curves_csv<R: Read>(r: R) -> Result<Vec<TrainingCurve>, RlError> {
    let mut curves: Vec<TrainingCurve> = Vec::new();
    for row in csv::Reader::from_reader(r).deserialize() {
        let row: CurveRow = row?;
        let point = CurvePoint {
            timesteps: row.timesteps,
            eval: EvalResult {
                mean_reward: row.mean_reward,
                std_error: row.std_error,
                episode_rewards: Vec::new(),
                budget_timesteps: row.timesteps,
            },
        };
        match curves.last_mut() {
            Some(c) if c.seed == row.seed && c.method == row.method && c.env == row.env => {
                c.points.push(point)
            }
            _ => curves.push(TrainingCurve {
                seed: row.seed,
                method: row.method,
                env: row.env,
                points: vec![point],
            }),
        }
    }
    Ok(curves)
}
