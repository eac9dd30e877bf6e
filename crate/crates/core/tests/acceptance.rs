//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Criteria 1-7 are property checks and fail the run. Criteria 8-12 train
//! the benchmark at desk scale (about 45 minutes on one core) and are
//! reported without failing it. `ACCEPTANCE_SCALED=0` skips them.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use srl_core::autodiff::{log_softmax, softmax, OptimizerConfig, ParamStore};
use srl_core::dataset::{collect, Dataset};
use srl_core::envs::{greedy_action, NavConfig, NavEnv, NavVariant, NUM_ACTIONS};
use srl_core::harness::{
    cmd_collect, cmd_report, cmd_train_rl, cmd_train_srl, content_hash, load_srl, merge_patch,
    run_experiment, ExperimentConfig, RunManifest, SRL_CHECKPOINT, SUMMARY_CSV, SUMMARY_JSON,
};
use srl_core::metrics::{gtc, mean_and_se, pearson};
use srl_core::rl::{
    ppo_update, ActorCritic, PolicyInput, PpoConfig, RolloutBuffer, Surrogate, TrainingCurve,
};
use srl_core::srl::{
    train, Batch, EncoderSpec, LossKind, LossWeights, Method, SrlModel, TrainOptions,
};

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn run(check: impl FnOnce() -> Check) -> Check {
    match catch_unwind(AssertUnwindSafe(check)) {
        Ok(r) => r,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    }
}

fn report(n: usize, name: &str, result: &Check) {
    match result {
        Ok(d) => println!("criterion {n:>2} PASS  {name}: {d}"),
        Err(d) => println!("criterion {n:>2} FAIL  {name}: {d}"),
    }
}

fn autodiff() -> Check {
    let start = Instant::now();
    let cases = common::grad_cases();
    ensure(cases.len() >= 20, || format!("only {} cases", cases.len()))?;
    let mut worst: f64 = 0.0;
    for (i, case) in cases.iter().enumerate() {
        for rep in 0..3 {
            let r = common::check_case(case, 7000 + 10 * i as u64 + rep, 1e-4)
                .map_err(|e| format!("{}: {e}", case.name))?;
            ensure(r.passed(), || {
                format!("{}: rel error {:e}", case.name, r.max_rel_error)
            })?;
            worst = worst.max(r.max_rel_error);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("took {secs:.1} s"))?;
    Ok(format!(
        "{} cases x 3 points, max rel error {worst:.1e}, {secs:.1} s",
        cases.len()
    ))
}

fn naive_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

fn gtc_math() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let n = rng.random_range(3..60);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|v| 0.7 * v + rng.random_range(-5.0..5.0))
            .collect();
        worst =
            worst.max((pearson(&x, &y).map_err(|e| e.to_string())? - naive_pearson(&x, &y)).abs());
    }
    ensure(worst < 1e-12, || {
        format!("pearson differs from oracle by {worst:e}")
    })?;
    let names = ["a", "b", "c"];
    for _ in 0..200 {
        let rows = rng.random_range(5..40);
        let mut mat = |cols: usize| -> Vec<f64> {
            (0..rows * cols)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect()
        };
        let (learned, extra, gt) = (mat(3), mat(2), mat(3));
        let g = |l: &[f64], d: usize| gtc(l, d, &gt, 3, &names).unwrap();
        let id = gtc(&gt, 3, &gt, 3, &names).unwrap();
        ensure(
            id.entries.iter().all(|e| (e.gtc - 1.0).abs() < 1e-12),
            || "identity is not all ones".into(),
        )?;
        let base = g(&learned, 3);
        let affine: Vec<f64> = learned
            .iter()
            .enumerate()
            .map(|(i, v)| [-3.0, 0.5, 2.0][i % 3] * v + 4.0)
            .collect();
        let permuted: Vec<f64> = learned.chunks(3).flat_map(|r| [r[2], r[0], r[1]]).collect();
        let wide: Vec<f64> = learned
            .chunks(3)
            .zip(extra.chunks(2))
            .flat_map(|(a, b)| a.iter().chain(b).copied())
            .collect();
        let (a, p, w) = (g(&affine, 3), g(&permuted, 3), g(&wide, 5));
        for k in 0..3 {
            let b = base.entries[k].gtc;
            ensure((a.entries[k].gtc - b).abs() < 1e-9, || {
                "affine map changed GTC".into()
            })?;
            ensure(p.entries[k].gtc == b, || "permutation changed GTC".into())?;
            ensure(w.entries[k].gtc >= b, || "extra dims lowered GTC".into())?;
        }
    }
    Ok(format!("pearson max diff {worst:.1e} on 1e4 pairs; identity/affine/permutation/monotone on 200 draws"))
}

fn batch_of(ds: &Dataset, rows: usize) -> Batch {
    let recs: Vec<_> = ds.records.iter().step_by(5).take(rows).collect();
    Batch::from_records(&recs, true).unwrap()
}

fn build(method: Method, grammar: Option<&str>, weights: LossWeights) -> SrlModel {
    SrlModel::build_with_grammar(
        method,
        &EncoderSpec::default(),
        grammar,
        None,
        weights,
        &NavConfig::default(),
        3,
    )
    .unwrap()
}

fn split_isolation(ds: &Dataset) -> Check {
    let b = batch_of(ds, 32);
    let m = build(Method::SrlSplits, None, LossWeights::default());
    let layout = m.layout().unwrap();
    let proj = m.projection().unwrap();
    let d = m.state_dim();
    let mut checked = 0;
    for kind in m.active_losses() {
        let range = layout.range_of(kind).unwrap();
        let g = m.head_gradients(&b, kind).map_err(|e| e.to_string())?;
        let w = g.get(proj.weight).unwrap();
        let bias = g.get(proj.bias).unwrap();
        for (k, &v) in w.iter().enumerate() {
            if !range.contains(&(k % d)) {
                ensure(v == 0.0, || {
                    format!("{kind:?} gradient {v:e} at column {}", k % d)
                })?;
                checked += 1;
            }
        }
        for (j, &v) in bias.iter().enumerate() {
            if !range.contains(&j) {
                ensure(v == 0.0, || format!("{kind:?} bias gradient at {j}"))?;
                checked += 1;
            }
        }
    }
    let w = LossWeights::default();
    let mut comb = build(Method::SrlCombination, None, w);
    let mut splits = build(Method::SrlSplits, Some("AE+Rew+Inv"), w);
    let (lc, gc) = comb.gradients(&b).unwrap();
    let (ls, gs) = splits.gradients(&b).unwrap();
    ensure(lc.total.to_bits() == ls.total.to_bits(), || {
        "combination loss differs".into()
    })?;
    for ((_, x), (_, y)) in gc.iter().zip(gs.iter()) {
        ensure(
            x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits()),
            || "gradients differ".into(),
        )?;
    }
    let (tr, va) = ds.split(0.2).unwrap();
    let opts = TrainOptions {
        epochs: 1,
        ..TrainOptions::default()
    };
    train(&mut comb, tr, va, &opts).unwrap();
    train(&mut splits, tr, va, &opts).unwrap();
    ensure(comb.store().bit_equal(splits.store()), || {
        "parameters differ after an epoch".into()
    })?;
    Ok(format!(
        "{} ({}) off-slice projection gradients all 0.0; combination == \"AE+Rew+Inv\" splits bit-exactly after 1 epoch",
        checked,
        layout.grammar()
    ))
}

fn loss_arithmetic(ds: &Dataset) -> Check {
    let b = batch_of(ds, 24);
    let grammar = Some("AE/Rew/Inv+Fwd");
    let w1 = LossWeights {
        reconstruction: 0.3,
        reward: 2.5,
        inverse: 4.0,
        forward: 0.125,
    };
    let w2 = LossWeights {
        reconstruction: 1.1,
        reward: 0.0,
        inverse: 0.5,
        forward: 3.0,
    };
    let sum = LossWeights {
        reconstruction: w1.reconstruction + w2.reconstruction,
        reward: w1.reward + w2.reward,
        inverse: w1.inverse + w2.inverse,
        forward: w1.forward + w2.forward,
    };
    let l1 = build(Method::SrlSplits, grammar, w1).loss(&b).unwrap();
    let l2 = build(Method::SrlSplits, grammar, w2).loss(&b).unwrap();
    let ls = build(Method::SrlSplits, grammar, sum).loss(&b).unwrap();
    let direct: f64 = l1.per_head.iter().map(|(&k, &v)| w1.get(k) * v).sum();
    ensure((l1.total - direct).abs() <= 1e-12 * direct.abs(), || {
        format!("{} != {direct}", l1.total)
    })?;
    ensure(
        (ls.total - l1.total - l2.total).abs() <= 1e-12 * ls.total.abs(),
        || "not additive in the weights".into(),
    )?;
    ensure(l1.per_head == ls.per_head, || {
        "per-loss values depend on weights".into()
    })?;
    let cfg = ExperimentConfig::from_json("{}").map_err(|e| e.to_string())?;
    let dw = cfg.srl.weights;
    ensure(
        (dw.reconstruction, dw.reward, dw.inverse) == (1.0, 1.0, 2.0),
        || format!("default weights {dw:?}"),
    )?;
    let explicit = ExperimentConfig::from_json(
        r#"{"srl": {"weights": {"reconstruction": 0.1, "reward": 0.7, "inverse": 2.2}}}"#,
    )
    .map_err(|e| e.to_string())?;
    let ew = explicit.srl.weights;
    ensure(
        ew.reconstruction.to_bits() == 0.1f64.to_bits()
            && ew.reward.to_bits() == 0.7f64.to_bits()
            && ew.inverse.to_bits() == 2.2f64.to_bits(),
        || "explicit weights not verbatim".into(),
    )?;
    Ok(format!(
        "total = sum w_k L_k (rel 1e-12), additive in w; defaults {:?}",
        (dw.reconstruction, dw.reward, dw.inverse)
    ))
}

fn environment() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut best = i64::MIN;
    for variant in [NavVariant::Target2d, NavVariant::Target1d] {
        let cfg = NavConfig {
            variant,
            ..NavConfig::default()
        };
        ensure(cfg.max_steps == 250, || {
            format!("max_steps {}", cfg.max_steps)
        })?;
        let mut env = NavEnv::new(cfg.clone()).map_err(|e| e.to_string())?;
        for ep in 0..100 {
            let mut obs = env.reset(ep);
            let mut total = 0i64;
            while !obs.done {
                obs = env.step(rng.random_range(0..NUM_ACTIONS)).unwrap();
                ensure(matches!(obs.reward, -1..=1), || {
                    format!("reward {}", obs.reward)
                })?;
                total += obs.reward as i64;
            }
            ensure(total <= 250, || format!("episode reward {total}"))?;
            best = best.max(total);
        }
        let (mut got, mut bound) = (0.0, 0.0);
        for ep in 0..100 {
            let mut obs = env.reset(10_000 + ep);
            bound += cfg.distance_adjusted_max(&obs.gt_state);
            while !obs.done {
                obs = env.step(greedy_action(&obs.gt_state, variant)).unwrap();
                got += obs.reward as f64;
            }
        }
        ensure(got >= 0.8 * bound, || {
            format!("{variant:?}: greedy {got} < 0.8 x {bound}")
        })?;
    }
    Ok(format!("rewards ternary, random-policy episode max {best} <= 250, greedy >= 0.8 of bound on both variants"))
}

fn tiny_config(out: &Path) -> ExperimentConfig {
    let mut v = json!({
        "data": { "samples": 600, "workers": 1 },
        "srl": { "epochs": 2 },
        "rl": { "seeds": [0, 1], "ppo": { "total_timesteps": 1024, "horizon": 256, "eval_checkpoints": [512, 1024], "eval_episodes": 4 } },
    });
    merge_patch(&mut v, &json!({ "out": out }));
    ExperimentConfig::from_value(v).unwrap()
}

fn determinism(root: &Path) -> Check {
    let out = root.join("determinism");
    let cfg = tiny_config(&out);
    let mut seen = Vec::new();
    for _ in 0..2 {
        let _ = std::fs::remove_dir_all(&out);
        run_experiment(&cfg, None).map_err(|e| e.to_string())?;
        cmd_report(&out).map_err(|e| e.to_string())?;
        let mut hashes = RunManifest::load(&out)
            .map_err(|e| e.to_string())?
            .artifacts;
        for f in [SUMMARY_CSV, SUMMARY_JSON] {
            hashes.insert(
                f.into(),
                content_hash(&out.join(f)).map_err(|e| e.to_string())?,
            );
        }
        seen.push(hashes);
    }
    ensure(seen[0] == seen[1], || {
        format!("{:?} vs {:?}", seen[0], seen[1])
    })?;
    Ok(format!(
        "{} artifact hashes identical across two runs ({})",
        seen[0].len(),
        seen[0].keys().cloned().collect::<Vec<_>>().join(", ")
    ))
}

fn bandit_buffer(
    policy: &ActorCritic,
    store: &ParamStore,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> RolloutBuffer {
    let mut buf = RolloutBuffer::new(1);
    let (logits, values) = policy.infer(store, 1, &[1.0]);
    let (p, lp) = (softmax(&logits), log_softmax(&logits));
    for _ in 0..n {
        let u: f64 = rng.random();
        let mut a = 0;
        let mut acc = p[0];
        while u >= acc && a + 1 < p.len() {
            a += 1;
            acc += p[a];
        }
        buf.states.push(1.0);
        buf.actions.push(a);
        buf.log_probs.push(lp[a]);
        buf.rewards.push(if a == 2 { 1.0 } else { 0.0 });
        buf.values.push(values[0]);
        buf.dones.push(true);
    }
    buf
}

fn ppo_sanity() -> Check {
    let cfg = PpoConfig {
        horizon: 64,
        minibatch_size: 32,
        learning_rate: 3e-3,
        hidden: vec![8],
        ..PpoConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let policy = ActorCritic::new(&mut store, PolicyInput::Vector(1), &cfg, &mut rng);
    let fresh = store.clone();
    let mut opt = OptimizerConfig::adam(cfg.learning_rate).build();
    let prob = |s: &ParamStore| softmax(&policy.infer(s, 1, &[1.0]).0)[2];
    let mut updates = 0;
    while prob(&store) <= 0.95 {
        ensure(updates < 200, || {
            format!("p = {:.3} after 200 updates", prob(&store))
        })?;
        let buf = bandit_buffer(&policy, &store, cfg.horizon, &mut rng);
        ppo_update(
            &policy,
            &mut store,
            &mut opt,
            &buf,
            &cfg,
            Surrogate::Clipped(cfg.clip_range),
            &mut rng,
        )
        .map_err(|e| e.to_string())?;
        updates += 1;
    }
    let buf = bandit_buffer(&policy, &fresh, 64, &mut rng);
    let step = |s: Surrogate| {
        let mut st = fresh.clone();
        let mut o = OptimizerConfig::adam(cfg.learning_rate).build();
        ppo_update(
            &policy,
            &mut st,
            &mut o,
            &buf,
            &cfg,
            s,
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        st
    };
    ensure(
        step(Surrogate::Clipped(1e6)).bit_equal(&step(Surrogate::Vanilla)),
        || "eps = 1e6 update differs from unclipped".into(),
    )?;
    Ok(format!(
        "p(rewarded) = {:.3} after {updates} updates; eps = 1e6 update bit-equal to unclipped",
        prob(&store)
    ))
}

// ---- scaled reproductions ----

struct Arm {
    label: &'static str,
    patch: Value,
    samples: usize,
}

struct ArmResult {
    curves: Vec<TrainingCurve>,
    srl_dir: PathBuf,
}

impl ArmResult {
    fn at(&self, t: u64) -> Vec<f64> {
        self.curves
            .iter()
            .filter_map(|c| c.points.iter().find(|p| p.timesteps == t))
            .map(|p| p.eval.mean_reward)
            .collect()
    }
}

const BUDGET: u64 = 200_000;

fn arms() -> Vec<Arm> {
    let arm = |label, patch, samples| Arm {
        label,
        patch,
        samples,
    };
    vec![
        arm(
            "ground_truth",
            json!({ "srl": { "method": "ground_truth" } }),
            5000,
        ),
        arm("srl_splits", json!({}), 5000),
        arm(
            "autoencoder",
            json!({ "srl": { "method": "autoencoder" } }),
            5000,
        ),
        arm(
            "raw_pixels",
            json!({ "srl": { "method": "raw_pixels" } }),
            5000,
        ),
        arm(
            "random_features",
            json!({ "srl": { "method": "random_features" } }),
            5000,
        ),
        arm(
            "splits_dim4",
            json!({ "srl": { "encoder": { "state_dim": 4 } } }),
            5000,
        ),
        arm(
            "splits_dim64",
            json!({ "srl": { "encoder": { "state_dim": 64 } } }),
            5000,
        ),
        arm("splits_1k", json!({}), 1000),
    ]
}

fn run_arms(root: &Path) -> Result<BTreeMap<&'static str, ArmResult>, String> {
    let mut datasets: BTreeMap<usize, PathBuf> = BTreeMap::new();
    let mut results = BTreeMap::new();
    let err = |e: srl_core::harness::HarnessError| e.to_string();
    for arm in arms() {
        let start = Instant::now();
        let mut v = serde_json::to_value(ExperimentConfig::default()).unwrap();
        merge_patch(&mut v, &arm.patch);
        merge_patch(
            &mut v,
            &json!({ "data": { "samples": arm.samples }, "out": root.join(arm.label) }),
        );
        let cfg = ExperimentConfig::from_value(v).map_err(err)?;
        let dataset = match datasets.get(&arm.samples) {
            Some(p) => p.clone(),
            None => {
                let mut dcfg = cfg.clone();
                dcfg.out = root.join(format!("data_{}", arm.samples));
                let p = cmd_collect(&dcfg).map_err(err)?;
                datasets.insert(arm.samples, p.clone());
                p
            }
        };
        cmd_train_srl(&cfg, &dataset).map_err(err)?;
        let srl_secs = start.elapsed().as_secs_f64();
        let curves = cmd_train_rl(&cfg, &cfg.out.join(SRL_CHECKPOINT)).map_err(err)?;
        let finals: Vec<String> = curves
            .iter()
            .map(|c| {
                format!(
                    "{:.1}",
                    c.points.last().map_or(f64::NAN, |p| p.eval.mean_reward)
                )
            })
            .collect();
        eprintln!(
            "  [{}] srl {srl_secs:.0} s, total {:.0} s, final rewards {}",
            arm.label,
            start.elapsed().as_secs_f64(),
            finals.join(" / ")
        );
        results.insert(
            arm.label,
            ArmResult {
                curves,
                srl_dir: cfg.out.clone(),
            },
        );
    }
    Ok(results)
}

fn fmt(name: &str, xs: &[f64]) -> String {
    let (m, se) = mean_and_se(xs);
    format!("{name} {m:.1} ± {se:.1}")
}

/// `a >= b`, allowing a shortfall of one standard error of the difference.
fn at_least(a: &[f64], b: &[f64]) -> bool {
    let ((ma, sa), (mb, sb)) = (mean_and_se(a), mean_and_se(b));
    ma >= mb - (sa * sa + sb * sb).sqrt()
}

fn inverse_slice_gtc(r: &ArmResult, root: &Path) -> Check {
    let model = load_srl(&r.srl_dir.join(SRL_CHECKPOINT)).map_err(|e| e.to_string())?;
    let ds =
        Dataset::load(root.join("data_5000").join("dataset.bin")).map_err(|e| e.to_string())?;
    let (_, val) = ds.train_val(0.1).map_err(|e| e.to_string())?;
    let inv = model
        .layout()
        .and_then(|l| l.range_of(LossKind::Inverse))
        .ok_or("no inverse slice")?;
    let obs: Vec<_> = val.records.iter().map(|r| &r.obs).collect();
    let gts: Vec<&[f64]> = val.records.iter().map(|r| r.gt_state.as_slice()).collect();
    let s = model.encode_batch(&obs, &gts).map_err(|e| e.to_string())?;
    let d = model.state_dim();
    let slice: Vec<f64> = s
        .chunks(d)
        .flat_map(|row| row[inv.clone()].to_vec())
        .collect();
    let robot: Vec<f64> = gts.iter().flat_map(|g| g[..2].to_vec()).collect();
    let rep =
        gtc(&slice, inv.len(), &robot, 2, &["x_robot", "y_robot"]).map_err(|e| e.to_string())?;
    let vals: Vec<f64> = rep.entries.iter().map(|e| e.gtc).collect();
    let detail = format!(
        "inverse slice dims {}..{} vs robot x/y on {} validation samples: {:.3} / {:.3} (need >= 0.7)",
        inv.start,
        inv.end,
        val.records.len(),
        vals[0],
        vals[1]
    );
    if vals.iter().all(|&v| v >= 0.7) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn verdict(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn scaled(root: &Path) -> Vec<(usize, &'static str, Check)> {
    let start = Instant::now();
    eprintln!("scaled reproductions: 8 configurations x 3 seeds at {BUDGET} steps");
    let results = catch_unwind(AssertUnwindSafe(|| run_arms(root)))
        .unwrap_or_else(|_| Err("panicked".into()));
    let names = [
        (8, "SRL-Splits GTC pattern"),
        (9, "ordering GT >= splits >= AE"),
        (10, "sample efficiency at 25% budget"),
        (11, "random features > 50% of GT"),
        (12, "state dim and train size"),
    ];
    let results = match results {
        Ok(r) => r,
        Err(e) => {
            return names
                .iter()
                .map(|&(n, s)| (n, s, Err(format!("run failed: {e}"))))
                .collect()
        }
    };
    let fin = |k: &str| results[k].at(BUDGET);
    let mut out = Vec::new();

    out.push((
        8,
        names[0].1,
        run(|| inverse_slice_gtc(&results["srl_splits"], root)),
    ));

    let (gt, sp, ae) = (fin("ground_truth"), fin("srl_splits"), fin("autoencoder"));
    out.push((
        9,
        names[1].1,
        verdict(
            at_least(&gt, &sp) && at_least(&sp, &ae),
            format!(
                "{}, {}, {}",
                fmt("GT", &gt),
                fmt("splits", &sp),
                fmt("AE", &ae)
            ),
        ),
    ));

    let quarter = BUDGET / 4;
    let (s25, r25) = (
        results["srl_splits"].at(quarter),
        results["raw_pixels"].at(quarter),
    );
    let ((ms, ss), (mr, sr)) = (mean_and_se(&s25), mean_and_se(&r25));
    let se = (ss * ss + sr * sr).sqrt();
    out.push((
        10,
        names[2].1,
        verdict(
            ms - mr >= se && ms > mr,
            format!(
                "at {quarter} steps {}, {}; gap {:.1} vs SE {se:.1} (at 25000: splits {:.1}, raw {:.1})",
                fmt("splits", &s25),
                fmt("raw", &r25),
                ms - mr,
                mean_and_se(&results["srl_splits"].at(25_000)).0,
                mean_and_se(&results["raw_pixels"].at(25_000)).0
            ),
        ),
    ));

    let rf = fin("random_features");
    let (mrf, mgt) = (mean_and_se(&rf).0, mean_and_se(&gt).0);
    out.push((
        11,
        names[3].1,
        verdict(
            mrf > 0.5 * mgt,
            format!(
                "{}, {}; ratio {:.2} (need > 0.50)",
                fmt("RF", &rf),
                fmt("GT", &gt),
                mrf / mgt
            ),
        ),
    ));

    let (d4, d32, d64, k1) = (
        fin("splits_dim4"),
        sp.clone(),
        fin("splits_dim64"),
        fin("splits_1k"),
    );
    let ((m32, s32), (m64, s64)) = (mean_and_se(&d32), mean_and_se(&d64));
    let close = (m32 - m64).abs() <= (s32 * s32 + s64 * s64).sqrt();
    let d4_worse = mean_and_se(&d4).0 < m32.min(m64);
    let k1_worse = mean_and_se(&k1).0 < m32;
    out.push((
        12,
        names[4].1,
        verdict(
            close && d4_worse && k1_worse,
            format!(
                "{}, {}, {} (32 vs 64 within 1 SE: {close}, dim 4 worse: {d4_worse}); {} vs 5k {:.1} (1k worse: {k1_worse})",
                fmt("dim4", &d4),
                fmt("dim32", &d32),
                fmt("dim64", &d64),
                fmt("1k", &k1),
                m32
            ),
        ),
    ));
    eprintln!(
        "scaled reproductions took {:.0} s",
        start.elapsed().as_secs_f64()
    );
    out
}

fn main() {
    // `cargo test -- --list` and filters are passed through to every target.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let dir = tempfile::tempdir().expect("temp dir");
    let ds = collect(&NavConfig::default(), 1000, 1).expect("dataset");

    let property: Vec<(usize, &str, Check)> = vec![
        (1, "autodiff gradients", run(autodiff)),
        (2, "GTC mathematics", run(gtc_math)),
        (3, "split isolation", run(|| split_isolation(&ds))),
        (4, "loss arithmetic", run(|| loss_arithmetic(&ds))),
        (5, "environment", run(environment)),
        (6, "determinism", run(|| determinism(dir.path()))),
        (7, "PPO sanity", run(ppo_sanity)),
    ];
    for (n, name, r) in &property {
        report(*n, name, r);
    }

    if std::env::var("ACCEPTANCE_SCALED").is_ok_and(|v| v == "0") {
        for (n, name) in [
            (8, "GTC pattern"),
            (9, "ordering"),
            (10, "sample efficiency"),
            (11, "random features"),
            (12, "dims / train size"),
        ] {
            println!("criterion {n:>2} SKIP  {name}: ACCEPTANCE_SCALED=0");
        }
    } else {
        for (n, name, r) in scaled(dir.path()) {
            report(n, name, &r);
        }
    }

    let failed: Vec<usize> = property
        .iter()
        .filter(|p| p.2.is_err())
        .map(|p| p.0)
        .collect();
    if !failed.is_empty() {
        println!("property criteria failed: {failed:?}");
        std::process::exit(1);
    }
}
