use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::manifest::{RunManifest, RunStatus};
use super::HarnessError;
use crate::autodiff::{save_checkpoint, ParamStore};
use crate::dataset::{collect_with_workers, Dataset};
use crate::metrics::{gtc, GtcReport};
use crate::rl::{train_rl, write_curves_csv, TrainingCurve};
use crate::srl::{load_model, save_model, train, Method, SrlModel, SrlTrainReport};

pub const CONFIG_FILE: &str = "config.json";
pub const DATASET_FILE: &str = "dataset.bin";
pub const SRL_CHECKPOINT: &str = "srl.ckpt";
pub const SRL_REPORT: &str = "srl_report.json";
pub const POLICY_CHECKPOINT: &str = "policy.ckpt";
pub const CURVE_FILE: &str = "curve.csv";
pub const GTC_FILE: &str = "gtc.json";

/// Which records [`cmd_gtc`] correlates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GtcSplit {
    Train,
    #[default]
    Val,
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtcFile {
    pub method: Method,
    pub split: GtcSplit,
    #[serde(flatten)]
    pub report: GtcReport,
}

/// Creates the run directory, writes the resolved config and opens its
/// manifest.
fn open_run(cfg: &ExperimentConfig) -> Result<(PathBuf, RunManifest), HarnessError> {
    let dir = cfg.out.clone();
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join(CONFIG_FILE), cfg.to_json() + "\n")?;
    let mut manifest = RunManifest::open(&dir, &cfg.hash());
    manifest.record(&dir, CONFIG_FILE)?;
    manifest.save(&dir)?;
    Ok((dir, manifest))
}

/// Runs `body` against the run's manifest and stores the outcome in it.
fn with_manifest<T>(
    cfg: &ExperimentConfig,
    body: impl FnOnce(&Path, &mut RunManifest) -> Result<T, HarnessError>,
) -> Result<T, HarnessError> {
    let (dir, mut manifest) = open_run(cfg)?;
    let out = body(&dir, &mut manifest);
    manifest.finish(match &out {
        Ok(_) => RunStatus::Complete,
        Err(e) => RunStatus::Failed(e.to_string()),
    });
    manifest.save(&dir)?;
    out
}

fn require(path: &Path) -> Result<(), HarnessError> {
    if path.exists() {
        Ok(())
    } else {
        Err(HarnessError::Missing(path.to_path_buf()))
    }
}

/// Key under which an artifact outside the run directory is recorded.
fn artifact_key(dir: &Path, path: &Path) -> String {
    match path.parent() {
        Some(p) if p == dir => path
            .file_name()
            .map_or_else(String::new, |f| f.to_string_lossy().into_owned()),
        _ => path.to_string_lossy().into_owned(),
    }
}

/// Collects the random-policy dataset into `<out>/dataset.bin`.
pub fn cmd_collect(cfg: &ExperimentConfig) -> Result<PathBuf, HarnessError> {
    with_manifest(cfg, |dir, manifest| {
        let path = dir.join(DATASET_FILE);
        collect_to(cfg, &path)?;
        manifest.record(dir, DATASET_FILE)?;
        Ok(path)
    })
}

pub(crate) fn collect_to(cfg: &ExperimentConfig, path: &Path) -> Result<(), HarnessError> {
    let mut ds = collect_with_workers(&cfg.env, cfg.data.samples, cfg.data.seed, cfg.data.workers)?;
    ds.mark_split(cfg.data.val_fraction)?;
    ds.save(path)?;
    Ok(())
}

fn load_dataset(cfg: &ExperimentConfig, path: &Path) -> Result<Dataset, HarnessError> {
    require(path)?;
    let ds = Dataset::load(path)?;
    if ds.header.env != cfg.env {
        return Err(HarnessError::Config(format!(
            "{} was collected with a different env config",
            path.display()
        )));
    }
    Ok(ds)
}

/// Trains the configured SRL model on `dataset` and writes `srl.ckpt` and
/// `srl_report.json`.
pub fn cmd_train_srl(
    cfg: &ExperimentConfig,
    dataset: &Path,
) -> Result<SrlTrainReport, HarnessError> {
    with_manifest(cfg, |dir, manifest| {
        let ds = load_dataset(cfg, dataset)?;
        let (train_set, val_set) = ds.train_val(cfg.data.val_fraction)?;
        let mut model = cfg.srl.build(&cfg.env)?;
        let report = train(&mut model, train_set, val_set, &cfg.srl.train_options())?;
        save_model(
            &model,
            Some(&report),
            dir.join(SRL_CHECKPOINT),
            dir.join(SRL_REPORT),
        )?;
        manifest.record_as(artifact_key(dir, dataset), dataset)?;
        manifest.record(dir, SRL_CHECKPOINT)?;
        manifest.record(dir, SRL_REPORT)?;
        Ok(report)
    })
}

/// Loads an SRL checkpoint with the sidecar next to it.
pub fn load_srl(checkpoint: &Path) -> Result<SrlModel, HarnessError> {
    require(checkpoint)?;
    let sidecar = checkpoint.with_file_name(SRL_REPORT);
    require(&sidecar)?;
    Ok(load_model(checkpoint, sidecar)?.0)
}

/// Trains one policy per configured RL seed on the frozen encoder and
/// writes `curve.csv` and `policy.ckpt` (parameters prefixed `seed_<n>/`).
pub fn cmd_train_rl(
    cfg: &ExperimentConfig,
    srl_checkpoint: &Path,
) -> Result<Vec<TrainingCurve>, HarnessError> {
    with_manifest(cfg, |dir, manifest| {
        let model = load_srl(srl_checkpoint)?;
        if model.env() != &cfg.env {
            return Err(HarnessError::Config(format!(
                "{} was trained on a different env config",
                srl_checkpoint.display()
            )));
        }
        let mut curves = Vec::new();
        let mut policies = ParamStore::new();
        for &seed in &cfg.rl.seeds {
            let run = train_rl(&model, &cfg.env, &cfg.rl.ppo, seed)?;
            for id in run.store.ids() {
                policies.add(
                    format!("seed_{seed}/{}", run.store.name(id)),
                    run.store.get(id).clone(),
                    run.store.is_trainable(id),
                );
            }
            curves.push(run.curve);
        }
        let f = BufWriter::new(File::create(dir.join(CURVE_FILE))?);
        write_curves_csv(f, &curves)?;
        save_checkpoint(&policies, dir.join(POLICY_CHECKPOINT))?;
        manifest.record_as(artifact_key(dir, srl_checkpoint), srl_checkpoint)?;
        manifest.record(dir, CURVE_FILE)?;
        manifest.record(dir, POLICY_CHECKPOINT)?;
        Ok(curves)
    })
}

/// Ground-truth correlation of the encoded `split` of `dataset`.
pub fn gtc_of(
    model: &SrlModel,
    ds: &Dataset,
    val_fraction: f64,
    split: GtcSplit,
) -> Result<GtcReport, HarnessError> {
    if model.method() == Method::RawPixels {
        return Err(HarnessError::Config(
            "gtc is not defined for raw_pixels (no learned state)".into(),
        ));
    }
    let (train_set, val_set) = ds.train_val(val_fraction)?;
    let records = match split {
        GtcSplit::Train => train_set.records,
        GtcSplit::Val => val_set.records,
        GtcSplit::All => &ds.records[..],
    };
    let obs: Vec<_> = records.iter().map(|r| &r.obs).collect();
    let gts: Vec<&[f64]> = records.iter().map(|r| r.gt_state.as_slice()).collect();
    let learned = model.encode_batch(&obs, &gts)?;
    let gt: Vec<f64> = gts.concat();
    let variant = model.env().variant;
    Ok(gtc(
        &learned,
        model.state_dim(),
        &gt,
        variant.gt_dim(),
        variant.gt_names(),
    )?)
}

/// Writes `gtc.json` for an SRL checkpoint evaluated on `dataset`.
pub fn cmd_gtc(
    cfg: &ExperimentConfig,
    srl_checkpoint: &Path,
    dataset: &Path,
    split: GtcSplit,
) -> Result<GtcFile, HarnessError> {
    with_manifest(cfg, |dir, manifest| {
        let model = load_srl(srl_checkpoint)?;
        let ds = load_dataset(cfg, dataset)?;
        let file = GtcFile {
            method: model.method(),
            split,
            report: gtc_of(&model, &ds, cfg.data.val_fraction, split)?,
        };
        std::fs::write(
            dir.join(GTC_FILE),
            serde_json::to_string_pretty(&file)? + "\n",
        )?;
        manifest.record(dir, GTC_FILE)?;
        Ok(file)
    })
}

/// Everything a single configuration produces.
pub struct RunOutcome {
    pub srl_report: SrlTrainReport,
    pub gtc: Option<GtcFile>,
    pub curves: Vec<TrainingCurve>,
}

/// Full pipeline in `cfg.out`: collect (unless `dataset` is given), train
/// SRL, GTC on the validation split (skipped for raw pixels) and RL.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    dataset: Option<&Path>,
) -> Result<RunOutcome, HarnessError> {
    let dataset = match dataset {
        Some(p) => p.to_path_buf(),
        None => cmd_collect(cfg)?,
    };
    let srl_report = cmd_train_srl(cfg, &dataset)?;
    let ckpt = cfg.out.join(SRL_CHECKPOINT);
    let gtc = if cfg.srl.method == Method::RawPixels {
        None
    } else {
        Some(cmd_gtc(cfg, &ckpt, &dataset, GtcSplit::Val)?)
    };
    let curves = cmd_train_rl(cfg, &ckpt)?;
    Ok(RunOutcome {
        srl_report,
        gtc,
        curves,
    })
}
