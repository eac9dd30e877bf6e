//! Browser bindings for the navigation env and the GTC metric. Build with
//! `wasm-pack build crates/web --target web --out-dir www/pkg` and serve `www/`.

use srl_core::envs::{greedy_action, NavConfig, NavEnv, NavVariant, StepResult};
use srl_core::metrics::gtc;
use wasm_bindgen::prelude::*;

#[wasm_bindgen]
pub struct NavDemo {
    env: NavEnv,
    last: StepResult,
    episode: u64,
    episode_reward: i64,
}

fn parse_variant(name: &str) -> Result<NavVariant, String> {
    serde_json::from_value(serde_json::Value::String(name.to_string()))
        .map_err(|_| format!("unknown variant `{name}` (expected target1d or target2d)"))
}

impl NavDemo {
    pub fn create(variant: &str, image_size: usize, seed: u64) -> Result<NavDemo, String> {
        let config = NavConfig {
            variant: parse_variant(variant)?,
            image_size,
            seed,
            ..NavConfig::default()
        };
        let mut env = NavEnv::new(config).map_err(|e| e.to_string())?;
        let last = env.reset(0);
        Ok(NavDemo {
            env,
            last,
            episode: 0,
            episode_reward: 0,
        })
    }

    pub fn apply(&mut self, action: usize) -> Result<i32, String> {
        if self.env.is_done() {
            self.reset();
        }
        self.last = self.env.step(action).map_err(|e| e.to_string())?;
        self.episode_reward += i64::from(self.last.reward);
        Ok(i32::from(self.last.reward))
    }
}

#[wasm_bindgen]
impl NavDemo {
    #[wasm_bindgen(constructor)]
    pub fn new(variant: &str, image_size: usize, seed: u64) -> Result<NavDemo, JsError> {
        Self::create(variant, image_size, seed).map_err(|e| JsError::new(&e))
    }

    /// Starts the next episode.
    pub fn reset(&mut self) {
        self.episode += 1;
        self.episode_reward = 0;
        self.last = self.env.reset(self.episode);
    }

    /// Applies an action (0 right, 1 left, 2 forward, 3 backward) and returns
    /// the reward. A finished episode is reset first.
    pub fn step(&mut self, action: usize) -> Result<i32, JsError> {
        self.apply(action).map_err(|e| JsError::new(&e))
    }

    /// The action the scripted ground-truth policy takes now.
    pub fn greedy_action(&self) -> usize {
        greedy_action(&self.last.gt_state, self.env.config().variant)
    }

    pub fn greedy_step(&mut self) -> Result<i32, JsError> {
        self.step(self.greedy_action())
    }

    pub fn image_size(&self) -> usize {
        self.last.observation.size()
    }

    /// Current observation as RGBA bytes, row-major.
    pub fn rgba(&self) -> Vec<u8> {
        self.last.observation.to_rgba()
    }

    pub fn gt_state(&self) -> Vec<f64> {
        self.last.gt_state.clone()
    }

    pub fn steps(&self) -> usize {
        self.env.state().steps_elapsed
    }

    pub fn done(&self) -> bool {
        self.env.is_done()
    }

    pub fn episode_reward(&self) -> i64 {
        self.episode_reward
    }
}

/// GTC of CSV rows whose first `gt_cols` columns are ground truth and the
/// rest learned dimensions. Returns the report as JSON.
pub fn gtc_from_csv(text: &str, gt_cols: usize) -> Result<String, String> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let mut gt = Vec::new();
    let mut learned = Vec::new();
    let mut width = None;
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| e.to_string())?;
        let row: Vec<f64> = record
            .iter()
            .map(|c| {
                c.parse::<f64>()
                    .map_err(|_| format!("row {}: `{c}` is not a number", i + 1))
            })
            .collect::<Result<_, _>>()?;
        if *width.get_or_insert(row.len()) != row.len() {
            return Err(format!(
                "row {} has {} columns, expected {}",
                i + 1,
                row.len(),
                width.unwrap_or(0)
            ));
        }
        if row.len() <= gt_cols {
            return Err(format!(
                "need more than {gt_cols} columns to have learned dimensions"
            ));
        }
        gt.extend_from_slice(&row[..gt_cols]);
        learned.extend_from_slice(&row[gt_cols..]);
    }
    let width = width.ok_or("no rows")?;
    let names: Vec<String> = (0..gt_cols).map(|j| format!("gt{j}")).collect();
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    let report = gtc(&learned, width - gt_cols, &gt, gt_cols, &names).map_err(|e| e.to_string())?;
    serde_json::to_string(&report).map_err(|e| e.to_string())
}

#[wasm_bindgen(js_name = gtcFromCsv)]
pub fn gtc_from_csv_js(text: &str, gt_cols: usize) -> Result<String, JsError> {
    gtc_from_csv(text, gt_cols).map_err(|e| JsError::new(&e))
}
