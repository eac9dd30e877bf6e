//! Representation and policy metrics: Pearson correlation, ground-truth
//! correlation (GTC) and mean episode reward.

use serde::{Deserialize, Serialize};

use crate::autodiff::linalg::compensated_sum;
use crate::envs::{greedy_action, NavConfig, NavEnv, NavVariant, StepResult};
use crate::rng::mix_seed;

pub type AgentError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("length mismatch: {x} vs {y}")]
    Length { x: usize, y: usize },
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("matrix of {len} values is not a multiple of {cols} columns")]
    Shape { len: usize, cols: usize },
    #[error("environment: {0}")]
    Env(#[from] crate::envs::EnvError),
    #[error("agent: {0}")]
    Agent(AgentError),
}

/// Pearson correlation and whether either input had zero variance (in which
/// case the coefficient is reported as 0).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correlation {
    pub rho: f64,
    pub zero_variance: bool,
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<(), MetricsError> {
    if x.len() != y.len() {
        return Err(MetricsError::Length {
            x: x.len(),
            y: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(MetricsError::TooFewSamples(x.len()));
    }
    Ok(())
}

pub fn correlation(x: &[f64], y: &[f64]) -> Result<Correlation, MetricsError> {
    check_pair(x, y)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(Correlation {
            rho: 0.0,
            zero_variance: true,
        });
    }
    Ok(Correlation {
        rho: (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0),
        zero_variance: false,
    })
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    correlation(x, y).map(|c| c.rho)
}

fn column(m: &[f64], cols: usize, j: usize) -> Vec<f64> {
    m.iter().skip(j).step_by(cols).copied().collect()
}

fn rows_of(m: &[f64], cols: usize) -> Result<usize, MetricsError> {
    if cols == 0 || !m.len().is_multiple_of(cols) {
        return Err(MetricsError::Shape { len: m.len(), cols });
    }
    Ok(m.len() / cols)
}

/// `rho[i][j]` between ground-truth dimension `i` and learned dimension `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationMatrix {
    pub rho: Vec<Vec<f64>>,
    pub zero_variance_gt: Vec<bool>,
    pub zero_variance_learned: Vec<bool>,
}

/// Correlations between every ground-truth column and every learned column
/// of two row-major `n x d` matrices.
pub fn correlation_matrix(
    learned: &[f64],
    learned_dim: usize,
    gt: &[f64],
    gt_dim: usize,
) -> Result<CorrelationMatrix, MetricsError> {
    let n = rows_of(learned, learned_dim)?;
    let ng = rows_of(gt, gt_dim)?;
    if n != ng {
        return Err(MetricsError::Length { x: n, y: ng });
    }
    if n < 2 {
        return Err(MetricsError::TooFewSamples(n));
    }
    let lcols: Vec<Vec<f64>> = (0..learned_dim)
        .map(|j| column(learned, learned_dim, j))
        .collect();
    let constant = |c: &[f64]| c.iter().all(|&v| v == c[0]);
    let zero_variance_learned: Vec<bool> = lcols.iter().map(|c| constant(c)).collect();
    let mut zero_variance_gt = Vec::with_capacity(gt_dim);
    let mut rho = Vec::with_capacity(gt_dim);
    for i in 0..gt_dim {
        let g = column(gt, gt_dim, i);
        zero_variance_gt.push(constant(&g));
        rho.push(
            lcols
                .iter()
                .map(|l| correlation(&g, l).map(|c| c.rho))
                .collect::<Result<Vec<_>, _>>()?,
        );
    }
    Ok(CorrelationMatrix {
        rho,
        zero_variance_gt,
        zero_variance_learned,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtcEntry {
    pub name: String,
    pub gtc: f64,
    /// Learned dimension attaining the maximum (smallest index on ties);
    /// `None` when the ground-truth dimension is constant.
    pub argmax: Option<usize>,
    pub zero_variance: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtcReport {
    pub entries: Vec<GtcEntry>,
    pub gtc_mean: f64,
    pub samples: usize,
    pub learned_dim: usize,
    /// Learned dimensions that were constant over the samples.
    pub zero_variance_learned: Vec<usize>,
}

impl GtcReport {
    pub fn values(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.gtc).collect()
    }

    pub fn argmax(&self) -> Vec<Option<usize>> {
        self.entries.iter().map(|e| e.argmax).collect()
    }
}

/// Per ground-truth dimension, the largest absolute correlation with any
/// learned dimension. `names` labels the ground-truth columns.
pub fn gtc(
    learned: &[f64],
    learned_dim: usize,
    gt: &[f64],
    gt_dim: usize,
    names: &[&str],
) -> Result<GtcReport, MetricsError> {
    let cm = correlation_matrix(learned, learned_dim, gt, gt_dim)?;
    let entries: Vec<GtcEntry> = (0..gt_dim)
        .map(|i| {
            let name = names
                .get(i)
                .map_or_else(|| format!("gt_{i}"), |s| s.to_string());
            if cm.zero_variance_gt[i] {
                return GtcEntry {
                    name,
                    gtc: 0.0,
                    argmax: None,
                    zero_variance: true,
                };
            }
            let mut best = (0.0, None);
            for (j, r) in cm.rho[i].iter().enumerate() {
                if best.1.is_none() || r.abs() > best.0 {
                    best = (r.abs(), Some(j));
                }
            }
            GtcEntry {
                name,
                gtc: best.0,
                argmax: best.1,
                zero_variance: false,
            }
        })
        .collect();
    let gtc_mean = compensated_sum(entries.iter().map(|e| e.gtc)) / gt_dim as f64;
    Ok(GtcReport {
        entries,
        gtc_mean,
        samples: learned.len() / learned_dim,
        learned_dim,
        zero_variance_learned: cm
            .zero_variance_learned
            .iter()
            .enumerate()
            .filter_map(|(j, &z)| z.then_some(j))
            .collect(),
    })
}

/// Chooses actions for a batch of concurrent episodes.
pub trait Agent {
    fn act(&mut self, observations: &[&StepResult]) -> Result<Vec<usize>, AgentError>;
}

/// Scripted policy reading the ground-truth state.
pub struct GreedyGtAgent(pub NavVariant);

impl Agent for GreedyGtAgent {
    fn act(&mut self, observations: &[&StepResult]) -> Result<Vec<usize>, AgentError> {
        Ok(observations
            .iter()
            .map(|o| greedy_action(&o.gt_state, self.0))
            .collect())
    }
}

/// Always the same action.
pub struct ConstantAgent(pub usize);

impl Agent for ConstantAgent {
    fn act(&mut self, observations: &[&StepResult]) -> Result<Vec<usize>, AgentError> {
        Ok(vec![self.0; observations.len()])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub mean_reward: f64,
    /// Sample standard deviation over episodes divided by `sqrt(episodes)`.
    pub std_error: f64,
    pub episode_rewards: Vec<f64>,
    pub budget_timesteps: u64,
}

/// Mean and standard error (`std / sqrt(n)`, sample std) of `xs`.
pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = compensated_sum(xs.iter().copied()) / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = compensated_sum(xs.iter().map(|x| (x - mean) * (x - mean))) / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Episodes stepped together per agent call.
const EVAL_LOCKSTEP: usize = 100;

/// Seed of evaluation episode `i`.
pub fn episode_seed(seed: u64, i: usize) -> u64 {
    mix_seed(seed, 0xE7A1_0000_0000 + i as u64)
}

/// Runs `episodes` fresh episodes with per-episode seeds derived from `seed`
/// and returns their summed rewards. Episodes have fixed length, so they are
/// advanced in lockstep and the agent sees them as one batch.
pub fn evaluate_policy(
    agent: &mut dyn Agent,
    env_config: &NavConfig,
    episodes: usize,
    seed: u64,
) -> Result<EvalResult, MetricsError> {
    let mut rewards = Vec::with_capacity(episodes);
    let mut start = 0;
    while start < episodes {
        let count = EVAL_LOCKSTEP.min(episodes - start);
        let mut envs = Vec::with_capacity(count);
        let mut obs = Vec::with_capacity(count);
        for i in start..start + count {
            let mut env = NavEnv::new(env_config.clone())?;
            obs.push(env.reset(episode_seed(seed, i)));
            envs.push(env);
        }
        let mut totals = vec![0.0; count];
        while !envs[0].is_done() {
            let refs: Vec<&StepResult> = obs.iter().collect();
            let actions = agent.act(&refs).map_err(MetricsError::Agent)?;
            if actions.len() != count {
                return Err(MetricsError::Length {
                    x: actions.len(),
                    y: count,
                });
            }
            for (k, (env, &a)) in envs.iter_mut().zip(&actions).enumerate() {
                let r = env.step(a)?;
                totals[k] += r.reward as f64;
                obs[k] = r;
            }
        }
        rewards.extend(totals);
        start += count;
    }
    let (mean_reward, std_error) = mean_and_se(&rewards);
    Ok(EvalResult {
        mean_reward,
        std_error,
        episode_rewards: rewards,
        budget_timesteps: 0,
    })
}
