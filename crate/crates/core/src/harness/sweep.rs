use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::commands::{collect_to, run_experiment, RunOutcome};
use super::config::ExperimentConfig;
use super::manifest::{content_hash, RunManifest, RunStatus, MANIFEST_FILE};
use super::HarnessError;

/// One setting of an axis: a label and a JSON merge patch applied to the
/// base config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxisValue {
    pub label: String,
    pub set: Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxis {
    pub name: String,
    pub values: Vec<AxisValue>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub name: String,
    #[serde(default)]
    pub base: ExperimentConfig,
    pub axes: Vec<SweepAxis>,
}

/// A fully resolved configuration of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRun {
    pub index: usize,
    pub label: String,
    pub config: ExperimentConfig,
}

const PRESETS: &[(&str, &str)] = &[
    ("ablation", include_str!("../../presets/ablation.json")),
    ("methods", include_str!("../../presets/methods.json")),
    ("seeds", include_str!("../../presets/seeds.json")),
    ("state_dim", include_str!("../../presets/state_dim.json")),
    ("train_size", include_str!("../../presets/train_size.json")),
    ("weights", include_str!("../../presets/weights.json")),
];

/// RFC 7386 merge: objects merge key by key, `null` deletes, anything else
/// replaces.
pub fn merge_patch(target: &mut Value, patch: &Value) {
    let Value::Object(p) = patch else {
        *target = patch.clone();
        return;
    };
    if !target.is_object() {
        *target = Value::Object(Default::default());
    }
    let t = target.as_object_mut().expect("just made an object");
    for (k, v) in p {
        if v.is_null() {
            t.remove(k);
        } else {
            merge_patch(t.entry(k.clone()).or_insert(Value::Null), v);
        }
    }
}

fn slug(label: &str) -> String {
    label
        .chars()
        .map(|c| match c {
            'a'..='z' | 'A'..='Z' | '0'..='9' | '-' | '.' => c,
            '+' => 'p',
            _ => '_',
        })
        .collect()
}

impl SweepSpec {
    pub fn preset_names() -> Vec<&'static str> {
        PRESETS.iter().map(|(n, _)| *n).collect()
    }

    pub fn preset(name: &str) -> Result<Self, HarnessError> {
        let text = PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| *t)
            .ok_or_else(|| {
                HarnessError::Config(format!(
                    "unknown sweep preset `{name}` (available: {})",
                    Self::preset_names().join(", ")
                ))
            })?;
        Self::from_json(text)
    }

    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let spec: Self =
            serde_path_to_error::deserialize(de).map_err(|e| HarnessError::ConfigKey {
                path: e.path().to_string(),
                message: e.into_inner().to_string(),
            })?;
        spec.base.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn run_count(&self) -> usize {
        self.axes.iter().map(|a| a.values.len()).product()
    }

    /// All runs in lexicographic axis order (first axis slowest), with
    /// outputs under `<out>/runs/`.
    pub fn expand(&self, out: &Path) -> Result<Vec<SweepRun>, HarnessError> {
        let base = serde_json::to_value(&self.base)?;
        let mut runs = Vec::with_capacity(self.run_count());
        for index in 0..self.run_count() {
            let mut rest = index;
            let mut picks = Vec::with_capacity(self.axes.len());
            for axis in self.axes.iter().rev() {
                picks.push(&axis.values[rest % axis.values.len()]);
                rest /= axis.values.len();
            }
            picks.reverse();
            let mut value = base.clone();
            for p in &picks {
                merge_patch(&mut value, &p.set);
            }
            let label = picks
                .iter()
                .map(|p| p.label.as_str())
                .collect::<Vec<_>>()
                .join(",");
            let mut config = ExperimentConfig::from_value(value).map_err(|e| match e {
                HarnessError::ConfigKey { path, message } => HarnessError::ConfigKey {
                    path,
                    message: format!("{message} (sweep run {index} `{label}`)"),
                },
                other => other,
            })?;
            config.out = out
                .join("runs")
                .join(format!("{index:03}_{}", slug(&label)));
            runs.push(SweepRun {
                index,
                label,
                config,
            });
        }
        Ok(runs)
    }
}

pub const SWEEP_CSV: &str = "sweep.csv";
pub const SWEEP_SPEC_FILE: &str = "sweep.json";

#[derive(Debug, Serialize, Deserialize)]
struct SweepRow {
    run: usize,
    label: String,
    method: String,
    env: String,
    seed: u64,
    timesteps: u64,
    mean_reward: f64,
    std_error: f64,
    gtc_mean: Option<f64>,
}

pub struct SweepOutcome {
    pub runs: Vec<SweepRun>,
    pub failures: Vec<(usize, String)>,
}

/// Runs every configuration of the sweep (up to `jobs` at once), sharing
/// datasets between runs with identical env and data settings, then writes
/// `sweep.csv` and a manifest in `out`. Failed runs are recorded and the
/// remaining runs still execute.
pub fn cmd_sweep(spec: &SweepSpec, out: &Path, jobs: usize) -> Result<SweepOutcome, HarnessError> {
    let runs = spec.expand(out)?;
    std::fs::create_dir_all(out.join("datasets"))?;
    std::fs::write(
        out.join(SWEEP_SPEC_FILE),
        serde_json::to_string_pretty(spec)? + "\n",
    )?;
    let spec_hash = content_hash(&out.join(SWEEP_SPEC_FILE))?;
    let mut manifest = RunManifest::open(out, &spec_hash);

    // Datasets first, once per distinct data config, in run order.
    let mut datasets: BTreeMap<String, PathBuf> = BTreeMap::new();
    for run in &runs {
        let key = run.config.data_hash();
        if let Entry::Vacant(slot) = datasets.entry(key) {
            let name = format!("datasets/{}.bin", &slot.key()[..16]);
            let path = out.join(&name);
            collect_to(&run.config, &path)?;
            manifest.record_as(name, &path)?;
            slot.insert(path);
        }
    }

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(usize, Result<RunOutcome, HarnessError>)>> = Mutex::new(Vec::new());
    std::thread::scope(|s| {
        for _ in 0..jobs.max(1).min(runs.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(run) = runs.get(i) else { break };
                let ds = &datasets[&run.config.data_hash()];
                let r = run_experiment(&run.config, Some(ds));
                results.lock().expect("no poisoned workers").push((i, r));
            });
        }
    });
    let mut results = results.into_inner().expect("no poisoned workers");
    results.sort_by_key(|(i, _)| *i);

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (i, r) in results {
        let run = &runs[i];
        match r {
            Ok(outcome) => {
                let gtc_mean = outcome.gtc.as_ref().map(|g| g.report.gtc_mean);
                for c in &outcome.curves {
                    for p in &c.points {
                        rows.push(SweepRow {
                            run: i,
                            label: run.label.clone(),
                            method: c.method.clone(),
                            env: c.env.clone(),
                            seed: c.seed,
                            timesteps: p.timesteps,
                            mean_reward: p.eval.mean_reward,
                            std_error: p.eval.std_error,
                            gtc_mean,
                        });
                    }
                }
            }
            Err(e) => failures.push((i, e.to_string())),
        }
        let run_dir = &run.config.out;
        if run_dir.join(MANIFEST_FILE).exists() {
            let key = format!(
                "{}/{}",
                run_dir.strip_prefix(out).unwrap_or(run_dir).display(),
                MANIFEST_FILE
            );
            manifest.record_as(key, &run_dir.join(MANIFEST_FILE))?;
        }
    }
    rows.sort_by_key(|r| (r.run, r.seed, r.timesteps));
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(out.join(SWEEP_CSV))?));
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    manifest.record(out, SWEEP_CSV)?;
    manifest.finish(if failures.is_empty() {
        RunStatus::Complete
    } else {
        RunStatus::Failed(format!("{} of {} runs failed", failures.len(), runs.len()))
    });
    manifest.save(out)?;
    Ok(SweepOutcome { runs, failures })
}
