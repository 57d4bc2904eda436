use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use deskbc_core::analysis::{
    causality_score_seeds, eval_sequences, fit_power_law, gap_sweep, keyboard_perplexity, select_checkpoint,
    write_causality_csv, write_gap_csv, write_scaling_csv, CausalityEvalConfig, LossyTransform, ScalingFitParams,
};
use deskbc_core::data::{
    load_dataset, quality_filter_with, save_dataset, Frame, QualityThresholds, Trajectory, TruncatedNormalParams,
};
use deskbc_core::env::{
    collect_dataset, collect_target_dataset, evaluate, evaluate_target, CollectConfig, Controller, CorridorConfig,
    CorridorWorld, EnvAction, EnvView, ExpertController, PolicyController, RandomController, TargetConfig, TrackDef,
    CORRIDOR_GAME,
};
use deskbc_core::inference::{benchmark, write_latency_csv, Engine, RealtimeConfig};
use deskbc_core::policy::checkpoint::{read_checkpoint, ModelKind};
use deskbc_core::policy::{
    fit_binning, idm_keyboard_accuracy, load_checkpoint, majority_keyboard_accuracy, pseudo_label, save_checkpoint,
    train, CheckpointMeta, IdmModel, ModelConfig, PolicyDataset, PolicyModel, TrainConfig, TrainReport,
};
use deskbc_core::toy::{final_mean_c, run_toy_single, CurvePoint, ToyExperimentConfig};
use serde::{Deserialize, Serialize};

use crate::failure::{invalid, runtime, Failure};
use crate::manifest::RunManifest;
use crate::{Cli, CmdResult, Command};

pub fn dispatch(cli: &Cli) -> CmdResult {
    if cli.workers == 0 {
        return Err(invalid("--workers must be at least 1"));
    }
    match &cli.command {
        Command::GenData(a) => gen_data(cli, a),
        Command::Filter(a) => filter(cli, a),
        Command::Train(a) => train_policy(cli, a),
        Command::TrainIdm(a) => train_idm(cli, a),
        Command::PseudoLabel(a) => pseudo_label_cmd(cli, a),
        Command::Rollout(a) => rollout(cli, a),
        Command::Evaluate(a) => evaluate_cmd(cli, a),
        Command::Benchmark(a) => benchmark_cmd(cli, a),
        Command::ToyRun(a) => toy_run(cli, a),
        Command::EvalCausality(a) => eval_causality(cli, a),
        Command::EvalPerplexity(a) => eval_perplexity(cli, a),
        Command::GapProbe(a) => gap_probe_cmd(cli, a),
        Command::FitScaling(a) => fit_scaling(cli, a),
    }
}

fn json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("config serialises")
}

fn require_dir(p: &Path) -> Result<(), Failure> {
    if p.is_dir() {
        Ok(())
    } else {
        Err(invalid(format!("{} is not a directory", p.display())))
    }
}

fn require_file(p: &Path) -> Result<(), Failure> {
    if p.is_file() {
        Ok(())
    } else {
        Err(invalid(format!("{} does not exist", p.display())))
    }
}

fn read_toml<T: for<'de> Deserialize<'de>>(p: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(p).map_err(|e| invalid(format!("{}: {e}", p.display())))?;
    toml::from_str(&text).map_err(|e| invalid(format!("{}: {e}", p.display())))
}

fn prepare_out(out: &Path) -> Result<(), Failure> {
    fs::create_dir_all(out).map_err(|e| runtime(format!("{}: {e}", out.display())))
}

fn dry_run_ok(what: &str) -> CmdResult {
    println!("dry run: {what} configuration is valid; nothing written");
    Ok(())
}

fn load_data(p: &Path) -> Result<Vec<Trajectory>, Failure> {
    require_dir(p)?;
    let d = load_dataset(p)?;
    if d.is_empty() {
        return Err(invalid(format!("{} holds no trajectories", p.display())));
    }
    Ok(d)
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> CmdResult {
    fs::write(path, serde_json::to_string_pretty(v).expect("serialises"))?;
    Ok(())
}

fn gen_data(cli: &Cli, a: &crate::GenDataArgs) -> CmdResult {
    let mut cfg: CollectConfig = match &a.config {
        Some(p) => read_toml(p)?,
        None => CollectConfig::default(),
    };
    if let Some(t) = &a.track {
        let text = fs::read_to_string(t).map_err(|e| invalid(format!("{}: {e}", t.display())))?;
        cfg.corridor.track = TrackDef::from_toml(&text)?;
    }
    if let Some(n) = a.noise {
        cfg.noise = n;
    }
    if let Some(m) = a.max_steps {
        cfg.max_steps = m;
    }
    cfg.corridor.validate()?;
    if !(0.0..=1.0).contains(&cfg.noise) || cfg.max_steps == 0 || a.episodes == 0 {
        return Err(invalid("need episodes >= 1, max_steps >= 1 and noise in [0, 1]"));
    }
    let target = TargetConfig::default();
    let is_target = match a.env.as_str() {
        "corridor" => false,
        "target-tap" => true,
        other => return Err(invalid(format!("unknown env `{other}` (corridor | target-tap)"))),
    };
    if cli.dry_run {
        return dry_run_ok("gen-data");
    }
    prepare_out(&a.out)?;
    let ranges = split_range(a.episodes, cli.workers);
    let parts: Vec<Result<Vec<Trajectory>, Failure>> = std::thread::scope(|s| {
        let hs: Vec<_> = ranges
            .iter()
            .map(|&(start, n)| {
                let (cfg, target) = (&cfg, &target);
                s.spawn(move || {
                    let seed = cli.seed + start as u64;
                    if is_target {
                        collect_target_dataset(n, a.target_steps, seed, target).map_err(Failure::from)
                    } else {
                        collect_dataset(n, seed, cfg).map_err(Failure::from)
                    }
                })
            })
            .collect();
        hs.into_iter().map(|h| h.join().expect("collector panicked")).collect()
    });
    let mut trajs = Vec::with_capacity(a.episodes);
    for p in parts {
        trajs.extend(p?);
    }
    save_dataset(&trajs, &a.out)?;
    let frames: usize = trajs.iter().map(|t| t.len()).sum();
    println!("wrote {} episodes ({frames} frames) to {}", trajs.len(), a.out.display());
    let config = serde_json::json!({ "env": a.env, "episodes": a.episodes, "collect": json(&cfg), "target": json(&target), "target_steps": a.target_steps });
    RunManifest::new("gen-data", config, cli.seed).write(&a.out)
}

/// Splits `n` items into at most `workers` contiguous `(start, len)` runs.
fn split_range(n: usize, workers: usize) -> Vec<(usize, usize)> {
    let w = workers.clamp(1, n.max(1));
    let per = n.div_ceil(w);
    (0..w).map(|i| (i * per, per.min(n.saturating_sub(i * per)))).filter(|r| r.1 > 0).collect()
}

fn filter(cli: &Cli, a: &crate::FilterArgs) -> CmdResult {
    let th = QualityThresholds { max_hold_fraction: a.max_hold, max_simultaneous_keys: a.max_keys, min_changes_per_100: a.min_changes };
    if !(0.0..=1.0).contains(&th.max_hold_fraction) || th.min_changes_per_100 < 0.0 {
        return Err(invalid("max-hold must be in [0, 1] and min-changes >= 0"));
    }
    let trajs = load_data(&a.data)?;
    if cli.dry_run {
        return dry_run_ok("filter");
    }
    prepare_out(&a.out)?;
    let mut w = csv::Writer::from_path(a.out.join("quality.csv"))?;
    w.write_record(["index", "game_id", "frames", "pass", "hold_fraction", "max_simultaneous_keys", "changes_per_100"])?;
    let mut kept = Vec::new();
    for (i, t) in trajs.into_iter().enumerate() {
        let r = quality_filter_with(&t, &th);
        w.write_record([
            i.to_string(),
            t.game_id.clone(),
            t.len().to_string(),
            r.pass().to_string(),
            format!("{:.4}", r.max_hold_fraction),
            r.max_simultaneous_keys.to_string(),
            format!("{:.3}", r.changes_per_100),
        ])?;
        if r.pass() {
            kept.push(t);
        }
    }
    w.flush()?;
    save_dataset(&kept, &a.out)?;
    println!("kept {} trajectories", kept.len());
    RunManifest::new("filter", json(&th), cli.seed).input(&a.data).write(&a.out)
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct TrainFile {
    model: ModelConfig,
    train: TrainConfig,
    bins_per_side: Option<usize>,
}

fn train_settings(cli: &Cli, a: &crate::TrainArgs) -> Result<TrainFile, Failure> {
    let mut f: TrainFile = match &a.config {
        Some(p) => read_toml(p)?,
        None => TrainFile::default(),
    };
    let t = &mut f.train;
    t.seed = cli.seed;
    t.steps = a.steps.unwrap_or(t.steps);
    t.batch_size = a.batch_size.unwrap_or(t.batch_size);
    t.window = a.window.or(t.window);
    t.learning_rate = a.lr.unwrap_or(t.learning_rate);
    t.eval_every = a.eval_every.unwrap_or(t.eval_every);
    f.bins_per_side.get_or_insert(10);
    f.model.validate()?;
    f.train.validate()?;
    Ok(f)
}

fn mouse_fit(trajs: &[Trajectory], bins: usize) -> (deskbc_core::data::QuantileBinning, TruncatedNormalParams) {
    let dx: Vec<f64> = trajs.iter().flat_map(|t| t.actions.iter().map(|a| a.dx)).collect();
    let dy: Vec<f64> = trajs.iter().flat_map(|t| t.actions.iter().map(|a| a.dy)).collect();
    (fit_binning(trajs, bins), TruncatedNormalParams::fit(&dx, &dy))
}

fn write_train_tables<M>(out: &Path, rep: &TrainReport<M>, hashes: &[String]) -> CmdResult {
    let mut w = csv::Writer::from_path(out.join("train_loss.csv"))?;
    w.write_record(["step", "loss"])?;
    for (i, l) in rep.train_losses.iter().enumerate() {
        w.write_record([(i + 1).to_string(), l.to_string()])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(out.join("checkpoints.csv"))?;
    w.write_record(["step", "train_loss", "test_loss", "sha256"])?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for (c, h) in rep.checkpoints.iter().zip(hashes) {
        w.write_record([c.meta.step.to_string(), opt(c.meta.train_loss), opt(c.meta.test_loss), h.clone()])?;
    }
    w.flush()?;
    Ok(())
}

fn checkpoint_name(step: usize) -> String {
    format!("ckpt-{step:07}.bin")
}

fn train_policy(cli: &Cli, a: &crate::TrainArgs) -> CmdResult {
    let s = train_settings(cli, a)?;
    let trajs = load_data(&a.data)?;
    let (binning, tn) = mouse_fit(&trajs, s.bins_per_side.unwrap());
    let model = PolicyModel::new(s.model.clone(), binning, tn, cli.seed)?;
    if cli.dry_run {
        return dry_run_ok("train");
    }
    prepare_out(&a.out)?;
    let rep = train(model, &trajs, &s.train)?;
    let mut hashes = Vec::new();
    for c in &rep.checkpoints {
        let mut m = rep.model.clone();
        m.store = c.store.clone();
        hashes.push(save_checkpoint(&a.out.join(checkpoint_name(c.meta.step)), &m, c.meta, c.optimizer.as_ref())?);
    }
    write_train_tables(&a.out, &rep, &hashes)?;
    let metas: Vec<CheckpointMeta> = rep.checkpoints.iter().map(|c| c.meta).collect();
    if let Ok(i) = select_checkpoint(&metas) {
        let best = serde_json::json!({ "step": metas[i].step, "test_loss": metas[i].test_loss, "file": checkpoint_name(metas[i].step) });
        write_json(&a.out.join("best.json"), &best)?;
        println!("best checkpoint: step {} (test loss {:?})", metas[i].step, metas[i].test_loss);
    }
    RunManifest::new("train", json(&s), cli.seed).input(&a.data).write(&a.out)?;
    match rep.halted {
        Some(e) => Err(runtime(format!("training halted: {e}; last good checkpoint kept"))),
        None => Ok(()),
    }
}

fn train_idm(cli: &Cli, a: &crate::TrainArgs) -> CmdResult {
    let s = train_settings(cli, a)?;
    let trajs = load_data(&a.data)?;
    let (binning, tn) = mouse_fit(&trajs, s.bins_per_side.unwrap());
    let idm = IdmModel::new(s.model.clone(), binning, tn, cli.seed)?;
    if cli.dry_run {
        return dry_run_ok("train-idm");
    }
    prepare_out(&a.out)?;
    let rep = train(idm, &trajs, &s.train)?;
    let last = rep.checkpoints.last().map(|c| c.meta).expect("step-0 checkpoint exists");
    let hash = rep.model.save(&a.out.join("idm.bin"), last)?;
    write_train_tables(&a.out, &rep, &[hash])?;
    let t = s.train.window.unwrap_or(s.model.history_length);
    let pick = |idx: &[usize]| idx.iter().map(|&i| &trajs[i]).collect::<Vec<_>>();
    let (train_refs, test_refs) = (pick(&rep.train_indices), pick(&rep.test_indices));
    let train_ds = PolicyDataset::new(&train_refs, &rep.model.binning, &rep.model.config)?;
    let test_ds = PolicyDataset::new(&test_refs, &rep.model.binning, &rep.model.config)?;
    let acc = idm_keyboard_accuracy(&rep.model, &test_ds, t);
    let base = majority_keyboard_accuracy(&train_ds, &test_ds, t);
    println!("held-out keyboard accuracy {acc:?} (majority baseline {base:?})");
    write_json(&a.out.join("idm_eval.json"), &serde_json::json!({ "keyboard_accuracy": acc, "majority_baseline": base }))?;
    RunManifest::new("train-idm", json(&s), cli.seed).input(&a.data).write(&a.out)?;
    match rep.halted {
        Some(e) => Err(runtime(format!("training halted: {e}"))),
        None => Ok(()),
    }
}

fn pseudo_label_cmd(cli: &Cli, a: &crate::PseudoLabelArgs) -> CmdResult {
    require_file(&a.idm)?;
    let trajs = load_data(&a.data)?;
    let idm = IdmModel::load(&a.idm)?;
    if cli.dry_run {
        return dry_run_ok("pseudo-label");
    }
    prepare_out(&a.out)?;
    let mut out = Vec::with_capacity(trajs.len());
    let mut reduced = 0;
    for t in trajs {
        let p = pseudo_label(&idm, &t.game_id, t.frames)?;
        reduced += p.reduced_context as usize;
        out.push(p.trajectory);
    }
    save_dataset(&out, &a.out)?;
    println!("labeled {} trajectories ({reduced} with reduced context)", out.len());
    RunManifest::new("pseudo-label", serde_json::json!({ "idm": a.idm }), cli.seed).input(&a.idm).input(&a.data).write(&a.out)
}

fn realtime_config(cli: &Cli, r: &crate::RealtimeArgs, model: &PolicyModel) -> Result<RealtimeConfig, Failure> {
    let c = RealtimeConfig {
        window: r.window.unwrap_or(model.config.history_length),
        temperature: r.temperature,
        seed: cli.seed,
        mouse_smoothing: r.mouse_smoothing,
        ..RealtimeConfig::default()
    };
    c.validate()?;
    Ok(c)
}

fn load_policy(p: &Path) -> Result<Arc<PolicyModel>, Failure> {
    require_file(p)?;
    Ok(Arc::new(load_checkpoint(p)?.0))
}

fn rollout(cli: &Cli, a: &crate::RolloutArgs) -> CmdResult {
    let model = load_policy(&a.checkpoint)?;
    let rt = realtime_config(cli, &a.realtime, &model)?;
    let env = CorridorConfig { resolution: model.config.frame_resolution, ..CorridorConfig::default() };
    env.validate()?;
    if a.budget == 0 {
        return Err(invalid("--budget must be positive"));
    }
    if cli.dry_run {
        return dry_run_ok("rollout");
    }
    prepare_out(&a.out)?;
    let mut ctrl = PolicyController::new(model, rt.clone())?;
    let mut trajs = Vec::new();
    let mut w = csv::Writer::from_path(a.out.join("episodes.csv"))?;
    w.write_record(["seed", "completed", "steps", "wall_contacts"])?;
    for i in 0..a.episodes as u64 {
        let seed = cli.seed + i;
        let mut world = CorridorWorld::reset(env.clone(), seed)?;
        ctrl.reset(seed);
        let (mut frames, mut actions): (Vec<Frame>, Vec<_>) = (Vec::new(), Vec::new());
        while world.steps < a.budget && !world.lap_complete() {
            let f = world.render();
            let raw = ctrl.act(&f, EnvView::Corridor(&world))?;
            world.step(&EnvAction::from_raw(&raw));
            frames.push(f);
            actions.push(raw);
        }
        w.write_record([seed.to_string(), world.lap_complete().to_string(), world.steps.to_string(), world.wall_contacts.to_string()])?;
        trajs.push(Trajectory::new(CORRIDOR_GAME, frames, actions));
    }
    w.flush()?;
    save_dataset(&trajs, &a.out)?;
    RunManifest::new("rollout", serde_json::json!({ "realtime": json(&rt), "episodes": a.episodes, "budget": a.budget }), cli.seed)
        .input(&a.checkpoint)
        .write(&a.out)
}

fn evaluate_cmd(cli: &Cli, a: &crate::EvaluateArgs) -> CmdResult {
    if a.budget == 0 || a.episodes == 0 {
        return Err(invalid("--budget and --episodes must be positive"));
    }
    let model = match a.policy.as_str() {
        "expert" | "random" => None,
        path => Some(load_policy(Path::new(path))?),
    };
    let rt = match &model {
        Some(m) => Some(realtime_config(cli, &a.realtime, m)?),
        None => None,
    };
    let resolution = model.as_ref().map_or(64, |m| m.config.frame_resolution);
    let corridor = CorridorConfig { resolution, ..CorridorConfig::default() };
    let target = TargetConfig { resolution, ..TargetConfig::default() };
    corridor.validate()?;
    if !matches!(a.env.as_str(), "corridor" | "target-tap") {
        return Err(invalid(format!("unknown env `{}`", a.env)));
    }
    if cli.dry_run {
        return dry_run_ok("evaluate");
    }
    let make = || -> Result<Box<dyn Controller + Send>, deskbc_core::error::EngineError> {
        Ok(match (&model, &rt) {
            (Some(m), Some(r)) => Box::new(PolicyController::new(m.clone(), r.clone())?),
            _ if a.policy == "expert" => Box::new(ExpertController::default()),
            _ => Box::new(RandomController::new()),
        })
    };
    let summary = if a.env == "corridor" {
        let stats = evaluate(|| make().map(BoxedController), &corridor, a.episodes, a.budget, cli.seed, cli.workers)?;
        println!(
            "completion {:.3} | steps_to_lap mean {} std {} | wall contacts {:.2}",
            stats.completion_rate,
            fmt_opt(stats.steps_mean),
            fmt_opt(stats.steps_std),
            stats.wall_contacts_mean
        );
        json(&stats)
    } else {
        let mut c = BoxedController(make()?);
        let stats = evaluate_target(&mut c, &target, a.episodes, a.budget, cli.seed)?;
        println!("hits mean {:.3} std {:.3}", stats.hits_mean, stats.hits_std);
        json(&stats)
    };
    if let Some(out) = &a.out {
        prepare_out(out)?;
        write_json(&out.join("eval.json"), &summary)?;
        let config = serde_json::json!({ "policy": a.policy, "env": a.env, "episodes": a.episodes, "budget": a.budget, "realtime": rt.as_ref().map(json) });
        RunManifest::new("evaluate", config, cli.seed).write(out)?;
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |x| format!("{x:.2}"))
}

struct BoxedController(Box<dyn Controller + Send>);

impl Controller for BoxedController {
    fn reset(&mut self, seed: u64) {
        self.0.reset(seed)
    }

    fn act(&mut self, frame: &Frame, view: EnvView<'_>) -> Result<deskbc_core::data::RawAction, deskbc_core::error::EngineError> {
        self.0.act(frame, view)
    }
}

fn benchmark_cmd(cli: &Cli, a: &crate::BenchmarkArgs) -> CmdResult {
    if a.steps < 100 {
        return Err(invalid("--steps must be at least 100"));
    }
    let model = match (&a.checkpoint, &a.config) {
        (Some(p), _) => load_policy(p)?,
        (None, cfg) => {
            let config: ModelConfig = match cfg {
                Some(p) => read_toml::<TrainFile>(p)?.model,
                None => ModelConfig::default(),
            };
            config.validate()?;
            let (b, tn) = mouse_fit(&collect_dataset(1, cli.seed, &CollectConfig::default())?, 10);
            Arc::new(PolicyModel::new(config, b, tn, cli.seed)?)
        }
    };
    let rt = realtime_config(cli, &a.realtime, &model)?;
    if cli.dry_run {
        return dry_run_ok("benchmark");
    }
    let r = model.config.frame_resolution;
    let env = CorridorConfig { resolution: r, ..CorridorConfig::default() };
    let mut world = CorridorWorld::reset(env, cli.seed)?;
    let expert = deskbc_core::env::CorridorExpert::default();
    let frames: Vec<Frame> = (0..64)
        .map(|_| {
            let f = world.render();
            world.step(&expert.act(&world));
            f
        })
        .collect();
    let mut engine = Engine::new(model.clone(), rt.clone())?;
    let (report, samples) = benchmark(&mut engine, &frames, a.steps)?;
    let text = toml::to_string(&report).expect("report serialises");
    println!("{text}");
    if let Some(out) = &a.out {
        prepare_out(out)?;
        write_latency_csv(fs::File::create(out.join("latency.csv"))?, &samples)?;
        fs::write(out.join("summary.toml"), &text)?;
        let config = serde_json::json!({ "model": json(&model.config), "realtime": json(&rt), "steps": a.steps });
        let mut m = RunManifest::new("benchmark", config, cli.seed);
        if let Some(p) = &a.checkpoint {
            m = m.input(p);
        }
        m.write(out)?;
    }
    Ok(())
}

fn toy_run(cli: &Cli, a: &crate::ToyRunArgs) -> CmdResult {
    let cfg = ToyExperimentConfig {
        depths: a.depths.clone(),
        steps: a.steps,
        lr: a.lr,
        width: a.width,
        seeds: (cli.seed..cli.seed + a.seeds).collect(),
        eval_every: a.eval_every,
        ..ToyExperimentConfig::default()
    };
    cfg.validate()?;
    if cli.dry_run {
        return dry_run_ok("toy-run");
    }
    prepare_out(&a.out)?;
    let jobs: Vec<(usize, u64)> = cfg.depths.iter().flat_map(|&d| cfg.seeds.iter().map(move |&s| (d, s))).collect();
    let ranges = split_range(jobs.len(), cli.workers);
    let parts: Vec<Result<Vec<CurvePoint>, Failure>> = std::thread::scope(|s| {
        let hs: Vec<_> = ranges
            .iter()
            .map(|&(start, n)| {
                let (jobs, cfg) = (&jobs, &cfg);
                s.spawn(move || {
                    let mut out = Vec::new();
                    for &(d, seed) in &jobs[start..start + n] {
                        let (_, curve) = run_toy_single(cfg, d, seed)?;
                        log::info!("toy depth {d} seed {seed}: final c = {:.4}", curve.last().unwrap().c);
                        out.extend(curve);
                    }
                    Ok(out)
                })
            })
            .collect();
        hs.into_iter().map(|h| h.join().expect("toy worker panicked")).collect()
    });
    let mut curves = Vec::new();
    for p in parts {
        curves.extend(p?);
    }
    let mut w = csv::Writer::from_path(a.out.join("curves.csv"))?;
    w.write_record(["depth", "seed", "step", "c"])?;
    for p in &curves {
        w.write_record([p.depth.to_string(), p.seed.to_string(), p.step.to_string(), p.c.to_string()])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(a.out.join("summary.csv"))?;
    w.write_record(["depth", "mean_final_c"])?;
    for (d, c) in final_mean_c(&curves) {
        println!("depth {d}: mean final c = {c:.4}");
        w.write_record([d.to_string(), c.to_string()])?;
    }
    w.flush()?;
    RunManifest::new("toy-run", json(&cfg), cli.seed).write(&a.out)
}

/// Checkpoints of a training run directory, in step order.
fn run_checkpoints(dir: &Path) -> Result<Vec<PathBuf>, Failure> {
    require_dir(dir)?;
    let mut v: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("ckpt-") && n.ends_with(".bin")))
        .collect();
    v.sort();
    if v.is_empty() {
        return Err(invalid(format!("no checkpoints in {}", dir.display())));
    }
    Ok(v)
}

fn eval_causality(cli: &Cli, a: &crate::EvalCausalityArgs) -> CmdResult {
    let paths = match (&a.checkpoint, &a.run) {
        (Some(p), None) => {
            require_file(p)?;
            vec![p.clone()]
        }
        (None, Some(r)) => run_checkpoints(r)?,
        _ => return Err(invalid("give exactly one of --checkpoint or --run")),
    };
    let cfg = CausalityEvalConfig { chunks: a.chunks, perturb_prob: a.p, batch_size: a.batch, seed: cli.seed };
    cfg.validate()?;
    if a.eval_seeds == 0 || a.seq_len < a.chunks {
        return Err(invalid("--eval-seeds must be >= 1 and --seq-len >= --chunks"));
    }
    let trajs = load_data(&a.data)?;
    for p in &paths {
        let d = read_checkpoint(p)?;
        if d.header.kind != ModelKind::Policy {
            return Err(invalid(format!("{} is not a policy checkpoint", p.display())));
        }
    }
    if cli.dry_run {
        return dry_run_ok("eval-causality");
    }
    let seeds: Vec<u64> = (cli.seed..cli.seed + a.eval_seeds).collect();
    let score_one = |p: &PathBuf| -> Result<(CheckpointMeta, f64, f64), Failure> {
        let (model, meta, _) = load_checkpoint(p)?;
        let refs: Vec<&Trajectory> = trajs.iter().collect();
        let ds = PolicyDataset::new(&refs, &model.binning, &model.config)?;
        let windows = ds.tiled_windows(a.seq_len, a.batch);
        let seqs = eval_sequences(&ds, &windows, a.seq_len);
        let (mean, std) = causality_score_seeds(&model, &seqs, &cfg, &seeds)?;
        log::info!("{}: causality {mean:.6} ± {std:.6}", p.display());
        Ok((meta, mean, std))
    };
    let ranges = split_range(paths.len(), cli.workers);
    let parts: Vec<Result<Vec<_>, Failure>> = std::thread::scope(|s| {
        let hs: Vec<_> = ranges
            .iter()
            .map(|&(start, n)| {
                let (paths, score_one) = (&paths, &score_one);
                s.spawn(move || paths[start..start + n].iter().map(score_one).collect())
            })
            .collect();
        hs.into_iter().map(|h| h.join().expect("causality worker panicked")).collect()
    });
    let mut rows = Vec::new();
    for p in parts {
        rows.extend(p?);
    }
    for (m, mean, std) in &rows {
        println!("step {}: causality score {mean:.6} (std {std:.2e} over {} seeds)", m.step, seeds.len());
    }
    if let Some(out) = &a.out {
        prepare_out(out)?;
        let table: Vec<(usize, Option<f64>, f64)> = rows.iter().map(|(m, s, _)| (m.step, m.test_loss, *s)).collect();
        write_causality_csv(fs::File::create(out.join("causality.csv"))?, &table)?;
        let stds: Vec<_> = rows.iter().map(|(m, s, d)| serde_json::json!({ "step": m.step, "mean": s, "std": d })).collect();
        write_json(&out.join("causality_seeds.json"), &stds)?;
        let mut man = RunManifest::new("eval-causality", serde_json::json!({ "eval": json(&cfg), "seq_len": a.seq_len, "eval_seeds": a.eval_seeds }), cli.seed)
            .input(&a.data);
        for p in &paths {
            man = man.input(p);
        }
        man.write(out)?;
    }
    Ok(())
}

fn eval_perplexity(cli: &Cli, a: &crate::EvalPerplexityArgs) -> CmdResult {
    let model = load_policy(&a.checkpoint)?;
    let trajs = load_data(&a.data)?;
    let t = a.window.unwrap_or(model.config.history_length);
    if t == 0 {
        return Err(invalid("--window must be positive"));
    }
    if cli.dry_run {
        return dry_run_ok("eval-perplexity");
    }
    let refs: Vec<&Trajectory> = trajs.iter().collect();
    let ds = PolicyDataset::new(&refs, &model.binning, &model.config)?;
    let ppl = keyboard_perplexity(&model, &ds, t)?;
    println!("keyboard perplexity {ppl:.4} (uniform baseline {})", model.config.key_vocab);
    if let Some(out) = &a.out {
        prepare_out(out)?;
        write_json(&out.join("perplexity.json"), &serde_json::json!({ "keyboard_perplexity": ppl, "window": t }))?;
        RunManifest::new("eval-perplexity", serde_json::json!({ "window": t }), cli.seed).input(&a.checkpoint).input(&a.data).write(out)?;
    }
    Ok(())
}

fn gap_probe_cmd(cli: &Cli, a: &crate::GapProbeArgs) -> CmdResult {
    for &s in &a.strengths {
        LossyTransform::parse(&a.transform, s)?;
    }
    if a.samples == 0 || a.seq_len == 0 {
        return Err(invalid("--samples and --seq-len must be positive"));
    }
    let model = load_policy(&a.checkpoint)?;
    let trajs = load_data(&a.data)?;
    if cli.dry_run {
        return dry_run_ok("gap-probe");
    }
    let refs: Vec<&Trajectory> = trajs.iter().collect();
    let ds = PolicyDataset::new(&refs, &model.binning, &model.config)?;
    let seqs = eval_sequences(&ds, &ds.tiled_windows(a.seq_len, a.samples), a.seq_len);
    let rows = gap_sweep(&model, &seqs, &a.transform, &a.strengths, a.samples, cli.seed)?;
    for r in &rows {
        println!("{} {}: mean KL {:.6}", r.transform, r.strength, r.mean_kl);
    }
    if let Some(out) = &a.out {
        prepare_out(out)?;
        write_gap_csv(fs::File::create(out.join("gap.csv"))?, &rows)?;
        let config = serde_json::json!({ "transform": a.transform, "strengths": a.strengths, "samples": a.samples, "seq_len": a.seq_len });
        RunManifest::new("gap-probe", config, cli.seed).input(&a.checkpoint).input(&a.data).write(out)?;
    }
    Ok(())
}

fn read_points(p: &Path) -> Result<Vec<(f64, f64)>, Failure> {
    require_file(p)?;
    let mut r = csv::Reader::from_path(p).map_err(|e| invalid(format!("{}: {e}", p.display())))?;
    let headers = r.headers().map_err(|e| invalid(e.to_string()))?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name).ok_or_else(|| invalid(format!("{} lacks a `{name}` column", p.display())));
    let (di, li) = (col("D")?, col("L")?);
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| invalid(e.to_string()))?;
        let num = |i: usize| rec.get(i).and_then(|v| v.trim().parse::<f64>().ok()).ok_or_else(|| invalid(format!("bad number in row {rec:?}")));
        out.push((num(di)?, num(li)?));
    }
    Ok(out)
}

fn fit_scaling(cli: &Cli, a: &crate::FitScalingArgs) -> CmdResult {
    let points = match &a.points {
        Some(p) => read_points(p)?,
        None => Vec::new(),
    };
    if a.predict.iter().any(|&d| !(d > 0.0)) {
        return Err(invalid("--predict sizes must be positive"));
    }
    let given = match &a.use_params {
        Some(v) => {
            if v.len() != 3 {
                return Err(invalid("--use-params takes exactly three values: L_INF,D_C,ALPHA"));
            }
            let p = ScalingFitParams { l_inf: v[0], d_c: v[1], alpha: v[2], residual: f64::NAN, identifiable: true };
            if p.l_inf < 0.0 || !(p.d_c > 0.0) || !(p.alpha > 0.0) {
                return Err(invalid("--use-params needs L_inf >= 0, D_c > 0, alpha > 0"));
            }
            Some(p)
        }
        None => None,
    };
    if given.is_none() && points.len() < 3 {
        return Err(invalid("need at least 3 points"));
    }
    if cli.dry_run {
        return dry_run_ok("fit-scaling");
    }
    let fit = match given {
        Some(p) => p,
        None => fit_power_law(&points)?,
    };
    println!("{}", serde_json::to_string_pretty(&fit).expect("serialises"));
    for &d in &a.predict {
        println!("L({d}) = {:.6}", fit.predict(d));
    }
    if let Some(out) = &a.out {
        prepare_out(out)?;
        write_json(&out.join("fit.json"), &fit)?;
        write_scaling_csv(fs::File::create(out.join("fit.csv"))?, &points, &fit)?;
        let mut m = RunManifest::new("fit-scaling", serde_json::json!({ "points": points, "use_params": a.use_params }), cli.seed);
        if let Some(p) = &a.points {
            m = m.input(p);
        }
        m.write(out)?;
    }
    Ok(())
}
