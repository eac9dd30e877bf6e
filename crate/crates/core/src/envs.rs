//! Pixel-observation navigation with a random target.
//!
//! A holonomic point robot moves in a square arena with four axis-aligned
//! actions. The target is either a disk (2-D variant) or a full-height band
//! around one x coordinate (1-D variant). Reward is +1 for every step that ends
//! on the target, -1 for every step that runs into a wall and 0 otherwise.
//! Episodes always last `max_steps` steps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::rng::mix_seed;

pub const NUM_ACTIONS: usize = 4;
pub const ACTION_RIGHT: usize = 0;
pub const ACTION_LEFT: usize = 1;
pub const ACTION_FORWARD: usize = 2;
pub const ACTION_BACKWARD: usize = 3;

/// Robot disk radius as a fraction of the arena side.
pub const ROBOT_RADIUS_FRACTION: f64 = 0.06;

pub const BACKGROUND_RGB: [u8; 3] = [0, 0, 0];
pub const WALL_RGB: [u8; 3] = [128, 128, 128];
pub const TARGET_RGB: [u8; 3] = [220, 40, 40];
pub const ROBOT_RGB: [u8; 3] = [40, 120, 255];

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EnvError {
    #[error("invalid navigation config: {0}")]
    InvalidConfig(String),
    #[error("image size {size} too small: {reason}")]
    ImageTooSmall { size: usize, reason: String },
    #[error("episode is done; call reset")]
    EpisodeDone,
    #[error("action {0} outside 0..4")]
    InvalidAction(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NavVariant {
    Target1d,
    Target2d,
}

impl NavVariant {
    pub fn gt_dim(self) -> usize {
        match self {
            NavVariant::Target1d => 3,
            NavVariant::Target2d => 4,
        }
    }

    /// Names of the ground-truth dimensions, in `gt_state` order.
    pub fn gt_names(self) -> &'static [&'static str] {
        match self {
            NavVariant::Target1d => &["x_robot", "y_robot", "x_target"],
            NavVariant::Target2d => &["x_robot", "y_robot", "x_target", "y_target"],
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            NavVariant::Target1d => "nav1d",
            NavVariant::Target2d => "nav2d",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NavConfig {
    pub variant: NavVariant,
    pub arena_size: f64,
    pub image_size: usize,
    pub max_steps: usize,
    pub step_length: f64,
    pub target_radius: f64,
    pub seed: u64,
}

impl Default for NavConfig {
    fn default() -> Self {
        Self {
            variant: NavVariant::Target2d,
            arena_size: 1.0,
            image_size: 32,
            max_steps: 250,
            step_length: 0.05,
            target_radius: 0.08,
            seed: 0,
        }
    }
}

impl NavConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: String| Err(EnvError::InvalidConfig(m));
        if !(self.arena_size.is_finite() && self.arena_size > 0.0) {
            return bad(format!(
                "arena_size must be positive, got {}",
                self.arena_size
            ));
        }
        if !(self.step_length > 0.0 && self.step_length < self.arena_size / 4.0) {
            return bad(format!(
                "step_length {} must be in (0, arena_size / 4)",
                self.step_length
            ));
        }
        if self.target_radius < self.step_length / 2.0 {
            return bad(format!(
                "target_radius {} must be at least step_length / 2",
                self.target_radius
            ));
        }
        if self.target_radius >= self.arena_size / 4.0 {
            return bad(format!(
                "target_radius {} must be below arena_size / 4",
                self.target_radius
            ));
        }
        if self.max_steps == 0 {
            return bad("max_steps must be positive".into());
        }
        self.check_image_size(self.image_size)
    }

    fn pixels_per_unit(&self, image_size: usize) -> f64 {
        (image_size as f64 - 2.0) / self.arena_size
    }

    fn check_image_size(&self, size: usize) -> Result<(), EnvError> {
        if size < 4 {
            return Err(EnvError::ImageTooSmall {
                size,
                reason: "need room for walls and interior".into(),
            });
        }
        let ppu = self.pixels_per_unit(size);
        let robot_px = ROBOT_RADIUS_FRACTION * self.arena_size * ppu;
        let target_px = self.target_radius * ppu;
        if robot_px < 1.0 || target_px < 1.0 {
            return Err(EnvError::ImageTooSmall {
                size,
                reason: format!(
                    "robot radius {robot_px:.2}px and target radius {target_px:.2}px must both be >= 1px"
                ),
            });
        }
        Ok(())
    }

    /// Side of the per-pixel input vector, `image_size^2 * 3`.
    pub fn obs_len(&self) -> usize {
        self.image_size * self.image_size * 3
    }

    /// Greedy-policy reward bound used as a solvability reference:
    /// `max_steps - chebyshev_distance / step_length`.
    pub fn distance_adjusted_max(&self, gt: &[f64]) -> f64 {
        let dx = (gt[2] - gt[0]).abs() * self.arena_size;
        let dy = match self.variant {
            NavVariant::Target2d => (gt[3] - gt[1]).abs() * self.arena_size,
            NavVariant::Target1d => 0.0,
        };
        self.max_steps as f64 - dx.max(dy) / self.step_length
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Target {
    Point { x: f64, y: f64 },
    Band { x: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    pub robot: (f64, f64),
    pub target: Target,
    pub steps_elapsed: usize,
}

impl EnvState {
    pub fn on_target(&self, target_radius: f64) -> bool {
        let (x, y) = self.robot;
        match self.target {
            Target::Point { x: tx, y: ty } => (x - tx).hypot(y - ty) <= target_radius,
            Target::Band { x: tx } => (x - tx).abs() <= target_radius,
        }
    }
}

/// Square RGB image stored row-major as HWC bytes.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Image {
    size: usize,
    pixels: Vec<u8>,
}

impl Image {
    pub fn from_pixels(size: usize, pixels: Vec<u8>) -> Option<Self> {
        (pixels.len() == size * size * 3).then_some(Self { size, pixels })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.size + col) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// RGBA bytes for canvas display.
    pub fn to_rgba(&self) -> Vec<u8> {
        self.pixels
            .chunks_exact(3)
            .flat_map(|p| [p[0], p[1], p[2], 255])
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub observation: Image,
    pub reward: i8,
    pub done: bool,
    pub gt_state: Vec<f64>,
}

/// Ground-truth state normalized by the arena side, in table order
/// `(x_robot, y_robot, x_target[, y_target])`.
pub fn gt_state(state: &EnvState, config: &NavConfig) -> Vec<f64> {
    let a = config.arena_size;
    let (x, y) = state.robot;
    match state.target {
        Target::Point { x: tx, y: ty } => vec![x / a, y / a, tx / a, ty / a],
        Target::Band { x: tx } => vec![x / a, y / a, tx / a],
    }
}

/// Inverse of [`gt_state`].
pub fn state_from_gt(gt: &[f64], config: &NavConfig, steps_elapsed: usize) -> EnvState {
    let a = config.arena_size;
    let target = match config.variant {
        NavVariant::Target2d => Target::Point {
            x: gt[2] * a,
            y: gt[3] * a,
        },
        NavVariant::Target1d => Target::Band { x: gt[2] * a },
    };
    EnvState {
        robot: (gt[0] * a, gt[1] * a),
        target,
        steps_elapsed,
    }
}

/// Deterministic rasterization: black floor, grey one-pixel walls, red target,
/// blue robot drawn on top.
pub fn render(state: &EnvState, config: &NavConfig, image_size: usize) -> Result<Image, EnvError> {
    config.check_image_size(image_size)?;
    let s = image_size;
    let ppu = config.pixels_per_unit(s);
    let to_px = |x: f64, y: f64| (1.0 + x * ppu, 1.0 + (config.arena_size - y) * ppu);
    let (rx, ry) = to_px(state.robot.0, state.robot.1);
    let robot_r2 = (ROBOT_RADIUS_FRACTION * config.arena_size * ppu).powi(2);
    let target_r = config.target_radius * ppu;
    let mut pixels = vec![0u8; s * s * 3];
    for row in 0..s {
        for col in 0..s {
            let (u, v) = (col as f64 + 0.5, row as f64 + 0.5);
            let wall = row == 0 || col == 0 || row == s - 1 || col == s - 1;
            let color = if wall {
                WALL_RGB
            } else if (u - rx).powi(2) + (v - ry).powi(2) <= robot_r2 {
                ROBOT_RGB
            } else if match state.target {
                Target::Point { x, y } => {
                    let (tx, ty) = to_px(x, y);
                    (u - tx).powi(2) + (v - ty).powi(2) <= target_r * target_r
                }
                Target::Band { x } => (u - to_px(x, 0.0).0).abs() <= target_r,
            } {
                TARGET_RGB
            } else {
                BACKGROUND_RGB
            };
            pixels[(row * s + col) * 3..(row * s + col) * 3 + 3].copy_from_slice(&color);
        }
    }
    Ok(Image { size: s, pixels })
}

/// One environment instance with its own state; no shared globals.
#[derive(Clone, Debug)]
pub struct NavEnv {
    config: NavConfig,
    state: EnvState,
    done: bool,
}

impl NavEnv {
    pub fn new(config: NavConfig) -> Result<Self, EnvError> {
        config.validate()?;
        let state = EnvState {
            robot: (0.0, 0.0),
            target: Target::Band { x: 0.0 },
            steps_elapsed: 0,
        };
        Ok(Self {
            config,
            state,
            done: true,
        })
    }

    pub fn config(&self) -> &NavConfig {
        &self.config
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Samples a fresh target uniformly over positions that keep it inside the
    /// arena, then a robot position uniformly over the arena off the target.
    pub fn reset(&mut self, episode_seed: u64) -> StepResult {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.config.seed, episode_seed));
        let a = self.config.arena_size;
        let r = self.config.target_radius;
        let target = match self.config.variant {
            NavVariant::Target2d => Target::Point {
                x: rng.random_range(r..=a - r),
                y: rng.random_range(r..=a - r),
            },
            NavVariant::Target1d => Target::Band {
                x: rng.random_range(r..=a - r),
            },
        };
        self.state = loop {
            let candidate = EnvState {
                robot: (rng.random_range(0.0..=a), rng.random_range(0.0..=a)),
                target,
                steps_elapsed: 0,
            };
            if !candidate.on_target(r) {
                break candidate;
            }
        };
        self.done = false;
        self.result(0)
    }

    /// Returns the state change for `action` without applying it: new
    /// position and whether a wall was hit.
    fn moved(&self, action: usize) -> ((f64, f64), bool) {
        let (x, y) = self.state.robot;
        let d = self.config.step_length;
        let (nx, ny) = match action {
            ACTION_RIGHT => (x + d, y),
            ACTION_LEFT => (x - d, y),
            ACTION_FORWARD => (x, y + d),
            _ => (x, y - d),
        };
        let a = self.config.arena_size;
        let hit = !(0.0..=a).contains(&nx) || !(0.0..=a).contains(&ny);
        ((nx.clamp(0.0, a), ny.clamp(0.0, a)), hit)
    }

    pub fn step(&mut self, action: usize) -> Result<StepResult, EnvError> {
        if self.done {
            return Err(EnvError::EpisodeDone);
        }
        if action >= NUM_ACTIONS {
            return Err(EnvError::InvalidAction(action));
        }
        let (pos, hit_wall) = self.moved(action);
        self.state.robot = pos;
        self.state.steps_elapsed += 1;
        let reward = if hit_wall {
            -1
        } else if self.state.on_target(self.config.target_radius) {
            1
        } else {
            0
        };
        self.done = self.state.steps_elapsed >= self.config.max_steps;
        Ok(self.result(reward))
    }

    fn result(&self, reward: i8) -> StepResult {
        StepResult {
            observation: render(&self.state, &self.config, self.config.image_size)
                .expect("image size validated at construction"),
            reward,
            done: self.done,
            gt_state: gt_state(&self.state, &self.config),
        }
    }

    /// Places the robot directly; used by tests and the demo.
    pub fn set_state(&mut self, state: EnvState) {
        self.done = state.steps_elapsed >= self.config.max_steps;
        self.state = state;
    }

    pub fn observe(&self) -> StepResult {
        self.result(0)
    }
}

/// Scripted policy with access to ground truth: step along the axis with the
/// larger remaining offset toward the target.
pub fn greedy_action(gt: &[f64], variant: NavVariant) -> usize {
    let dx = gt[2] - gt[0];
    let dy = match variant {
        NavVariant::Target2d => gt[3] - gt[1],
        NavVariant::Target1d => 0.0,
    };
    if dx.abs() >= dy.abs() {
        if dx >= 0.0 {
            ACTION_RIGHT
        } else {
            ACTION_LEFT
        }
    } else if dy >= 0.0 {
        ACTION_FORWARD
    } else {
        ACTION_BACKWARD
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env_at(robot: (f64, f64), target: Target) -> NavEnv {
        let mut env = NavEnv::new(NavConfig::default()).unwrap();
        env.set_state(EnvState {
            robot,
            target,
            steps_elapsed: 0,
        });
        env
    }

    #[test]
    fn wall_hit_clamps_and_penalizes() {
        let mut env = env_at((0.0, 0.5), Target::Point { x: 0.8, y: 0.8 });
        let r = env.step(ACTION_LEFT).unwrap();
        assert_eq!(r.reward, -1);
        assert_eq!(env.state().robot, (0.0, 0.5));
        // partial move into the wall clamps to the boundary
        let mut env = env_at((0.98, 0.5), Target::Point { x: 0.2, y: 0.2 });
        assert_eq!(env.step(ACTION_RIGHT).unwrap().reward, -1);
        assert_eq!(env.state().robot.0, 1.0);
    }

    #[test]
    fn reaching_target_rewards() {
        let mut env = env_at((0.45, 0.5), Target::Point { x: 0.55, y: 0.5 });
        assert_eq!(env.step(ACTION_RIGHT).unwrap().reward, 1);
        // staying on target keeps paying
        assert_eq!(env.step(ACTION_RIGHT).unwrap().reward, 1);
    }

    #[test]
    fn free_move_is_zero() {
        let mut env = env_at((0.5, 0.5), Target::Point { x: 0.1, y: 0.9 });
        assert_eq!(env.step(ACTION_FORWARD).unwrap().reward, 0);
        assert!((env.state().robot.1 - 0.55).abs() < 1e-12);
    }

    #[test]
    fn band_target_ignores_y() {
        let cfg = NavConfig {
            variant: NavVariant::Target1d,
            ..NavConfig::default()
        };
        let mut env = NavEnv::new(cfg).unwrap();
        env.set_state(EnvState {
            robot: (0.45, 0.05),
            target: Target::Band { x: 0.5 },
            steps_elapsed: 0,
        });
        assert_eq!(env.step(ACTION_FORWARD).unwrap().reward, 1);
        assert_eq!(env.observe().gt_state.len(), 3);
    }

    #[test]
    fn done_after_max_steps() {
        let cfg = NavConfig {
            max_steps: 3,
            ..NavConfig::default()
        };
        let mut env = NavEnv::new(cfg).unwrap();
        env.reset(1);
        assert!(!env.step(0).unwrap().done);
        assert!(!env.step(0).unwrap().done);
        assert!(env.step(0).unwrap().done);
        assert_eq!(env.step(0), Err(EnvError::EpisodeDone));
    }

    #[test]
    fn config_invariants_enforced() {
        let too_long = NavConfig {
            step_length: 0.3,
            ..NavConfig::default()
        };
        assert!(too_long.validate().is_err());
        let skippable = NavConfig {
            target_radius: 0.02,
            ..NavConfig::default()
        };
        assert!(skippable.validate().is_err());
        let tiny = NavConfig {
            image_size: 12,
            ..NavConfig::default()
        };
        assert!(matches!(
            tiny.validate(),
            Err(EnvError::ImageTooSmall { .. })
        ));
    }

    #[test]
    fn gt_normalization() {
        let env = env_at((0.5, 0.5), Target::Point { x: 0.25, y: 0.75 });
        assert_eq!(env.observe().gt_state, vec![0.5, 0.5, 0.25, 0.75]);
    }

    #[test]
    fn greedy_moves_toward_target() {
        let v = NavVariant::Target2d;
        assert_eq!(greedy_action(&[0.1, 0.5, 0.9, 0.5], v), ACTION_RIGHT);
        assert_eq!(greedy_action(&[0.9, 0.5, 0.1, 0.5], v), ACTION_LEFT);
        assert_eq!(greedy_action(&[0.5, 0.1, 0.5, 0.9], v), ACTION_FORWARD);
        assert_eq!(greedy_action(&[0.5, 0.9, 0.5, 0.1], v), ACTION_BACKWARD);
    }
}
