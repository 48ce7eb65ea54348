use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;
use structpose::config::{Task, TrainConfig};
use structpose::data::PoseDataset;
use structpose::evaluation::{evaluate_face, evaluate_lift, evaluate_pose};
use structpose::heatmap::{Direction, LandmarkSet};
use structpose::lifting3d::{load_lifter, save_lifter, train_lifter, PairedData};
use structpose::synthdata::{generate_dataset, generate_pairs, read_pairs, write_dataset, write_pairs, SkeletonSpec, SynthConfig};
use structpose::training::{load_generator, predict_landmarks, train_loop, LoopOptions};

use crate::error::{CliError, CliResult};
use crate::manifest::{input, write_atomic, RunManifest};
use crate::plot::{read_curve, write_plot, Series};
use crate::{Command, EvalArgs, LiftArgs, PlotArgs, SynthArgs, SynthKind, TaskArg, TrainArgs};

pub const PAIRS: &str = "pairs.jsonl";
pub const SKELETON: &str = "skeleton.json";
pub const ANNOTATIONS: &str = "annotations.jsonl";

pub fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Lift(a) => lift(a),
        Command::Plot(a) => plot(a),
    }
}

fn require(path: &Path, what: &str) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::usage(format!("{what} {} does not exist", path.display())))
    }
}

fn create_out(out: &Path) -> CliResult<()> {
    fs::create_dir_all(out).map_err(|e| CliError::io(out.display().to_string(), e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    write_atomic(path, (serde_json::to_string_pretty(value)? + "\n").as_bytes())
}

fn read_skeleton(dir: &Path) -> CliResult<SkeletonSpec> {
    let p = dir.join(SKELETON);
    if !p.exists() {
        return Ok(SkeletonSpec::default());
    }
    let text = fs::read_to_string(&p).map_err(|e| CliError::io(p.display().to_string(), e))?;
    let spec: SkeletonSpec = serde_json::from_str(&text)?;
    spec.validate()?;
    Ok(spec)
}

fn synth(a: SynthArgs) -> CliResult<()> {
    let started = Instant::now();
    if a.n == 0 {
        return Err(CliError::usage("--n must be positive"));
    }
    let cfg = SynthConfig {
        occlusion_rate: a.occlusion_rate,
        clutter: a.clutter,
        pose_noise: a.pose_noise,
        seed: a.seed,
        ..Default::default()
    };
    cfg.validate().map_err(|e| CliError::usage(e.to_string()))?;
    let spec = SkeletonSpec::default();
    let settings = json!({"kind": format!("{:?}", a.kind).to_lowercase(), "n": a.n, "first_index": a.first_index, "synth": cfg});
    match a.kind {
        SynthKind::Images => {
            let samples = generate_dataset(&spec, &cfg, a.n, a.first_index)?;
            create_out(&a.out)?;
            write_dataset(&a.out, &samples, &spec, &cfg)?;
        }
        SynthKind::Pairs => {
            let pairs = generate_pairs(&spec, a.n, a.pose_noise, a.seed.wrapping_add(a.first_index));
            create_out(&a.out)?;
            write_pairs(&a.out.join(PAIRS), &pairs)?;
            write_json(&a.out.join(SKELETON), &spec)?;
        }
    }
    let m = RunManifest::new("synth", Some(serde_json::to_string(&settings)?), Some(a.seed), vec![]);
    m.finish(&a.out, started.elapsed().as_secs_f64())?;
    tracing::info!(command = "synth", n = a.n, out = %a.out.display(), "done");
    Ok(())
}

fn train_config(a: &TrainArgs) -> CliResult<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => {
            require(p, "config file")?;
            TrainConfig::load(p)?
        }
        None => TrainConfig::default(),
    };
    if let Some(t) = a.task {
        cfg.task = match t {
            TaskArg::Pose2d => Task::Pose2d,
            TaskArg::Face => Task::Face,
            TaskArg::Lift3d => Task::Lift3d,
        };
    }
    if a.baseline {
        cfg.baseline = true;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    for kv in &a.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: TrainArgs) -> CliResult<()> {
    let started = Instant::now();
    let cfg = train_config(&a)?;
    require(&a.data, "training data")?;
    if let Some(v) = &a.val {
        require(v, "validation data")?;
    }
    let mut inputs = Vec::new();
    if let Some(p) = &a.config {
        inputs.push(input("config", p)?);
    }
    inputs.push(input("data", &a.data)?);
    if let Some(v) = &a.val {
        inputs.push(input("val", v)?);
    }
    let text = cfg.to_text();
    if cfg.task == Task::Lift3d {
        let spec = read_skeleton(&a.data)?;
        let load = |dir: &Path, seed: u64| -> CliResult<PairedData> {
            let pairs = read_pairs(&pairs_path(dir))?;
            Ok(PairedData::new(&pairs, &spec, cfg.input_noise, seed)?)
        };
        let tr = load(&a.data, cfg.seed)?;
        let va = a.val.as_deref().map(|v| load(v, cfg.seed.wrapping_add(1))).transpose()?;
        let out = train_lifter(&cfg, &spec, &tr, va.as_ref(), !cfg.baseline, true)?;
        create_out(&a.out)?;
        save_lifter(&out.model, &cfg, &spec, &a.out.join("lifter.spck"))?;
        let mut csv = String::from("epoch,loss,L_P3D,val_MPJPE\n");
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.9}")).unwrap_or_default();
        for h in &out.history {
            csv.push_str(&format!("{},{:.9},{},{}\n", h.epoch, h.loss, opt(h.l_p3d), opt(h.val_mpjpe)));
        }
        write_atomic(&a.out.join("history.csv"), csv.as_bytes())?;
    } else {
        let tr = PoseDataset::load_dir(&a.data, &cfg)?;
        let va = a.val.as_deref().map(|v| PoseDataset::load_dir(v, &cfg)).transpose()?;
        create_out(&a.out)?;
        let opts = LoopOptions {
            out_dir: Some(a.out.clone()),
            verbose: true,
        };
        train_loop(&cfg, &tr, va.as_ref(), &opts)?;
    }
    write_atomic(&a.out.join("config.txt"), text.as_bytes())?;
    let m = RunManifest::new("train", Some(text), Some(cfg.seed), inputs);
    m.finish(&a.out, started.elapsed().as_secs_f64())?;
    tracing::info!(command = "train", out = %a.out.display(), "done");
    Ok(())
}

fn pairs_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(PAIRS)
    } else {
        p.to_path_buf()
    }
}

#[derive(Serialize, Deserialize)]
struct Prediction2d {
    coords: Vec<[f64; 2]>,
}

#[derive(Serialize, Deserialize)]
struct Prediction3d {
    coords3d: Vec<[f64; 3]>,
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path.display().to_string(), e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(CliError::from))
        .collect()
}

fn jsonl<T: Serialize>(rows: &[T]) -> CliResult<String> {
    let mut s = String::new();
    for r in rows {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

fn eval(a: EvalArgs) -> CliResult<()> {
    let started = Instant::now();
    require(&a.data, "evaluation data")?;
    for p in [&a.model, &a.predictions].into_iter().flatten() {
        require(p, "input")?;
    }
    let mut inputs = vec![input("data", &a.data)?];
    if let Some(p) = &a.model {
        inputs.push(input("model", p)?);
    }
    if let Some(p) = &a.predictions {
        inputs.push(input("predictions", p)?);
    }
    let is_3d = pairs_path(&a.data).is_file() && !a.data.join(ANNOTATIONS).exists();
    if is_3d {
        eval_3d(&a)?;
    } else {
        if a.protocol.is_some() {
            return Err(CliError::usage("--protocol applies to 3D pairs data only"));
        }
        eval_2d(&a)?;
    }
    let m = RunManifest::new("eval", a.protocol.map(|p| format!("protocol = {p}\n")), None, inputs);
    m.finish(&a.out, started.elapsed().as_secs_f64())?;
    tracing::info!(command = "eval", out = %a.out.display(), "done");
    Ok(())
}

fn eval_2d(a: &EvalArgs) -> CliResult<()> {
    if !a.data.join(ANNOTATIONS).is_file() {
        return Err(CliError::usage(format!("{} has neither {ANNOTATIONS} nor {PAIRS}", a.data.display())));
    }
    let (ds, preds, cfg) = match (&a.model, &a.predictions) {
        (Some(m), _) => {
            let (g, mut cfg) = load_generator(m)?;
            cfg.augment = false;
            let ds = PoseDataset::load_dir(&a.data, &cfg)?;
            let preds = predict_landmarks(&g, &ds)?;
            (ds, preds, cfg)
        }
        (None, Some(p)) => {
            let cfg = TrainConfig {
                augment: false,
                ..TrainConfig::default()
            };
            let ds = PoseDataset::load_dir(&a.data, &cfg)?;
            let rows: Vec<Prediction2d> = read_jsonl(p)?;
            if rows.len() != ds.len() {
                return Err(structpose::Error::invalid(format!("{} predictions for {} samples", rows.len(), ds.len())).into());
            }
            let preds = rows
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    let lms = LandmarkSet::from_points2(&r.coords)?;
                    ds.crop(i).map_landmarks(&lms, Direction::Forward)
                })
                .collect::<structpose::Result<Vec<_>>>()?;
            (ds, preds, cfg)
        }
        (None, None) => unreachable!("clap requires --model or --predictions"),
    };
    let image_coords: Vec<Prediction2d> = preds
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let q = ds.crop(i).map_landmarks(p, Direction::Inverse)?;
            Ok(Prediction2d {
                coords: (0..q.len()).map(|j| q.point2(j)).collect(),
            })
        })
        .collect::<structpose::Result<_>>()?;
    create_out(&a.out)?;
    if cfg.task == Task::Face {
        let eyes = cfg.eyes.ok_or_else(|| CliError::usage("face model without eye indices"))?;
        let r = evaluate_face(&preds, &ds, eyes)?;
        write_atomic(&a.out.join("curve.csv"), r.nme.curve_csv().as_bytes())?;
        write_json(&a.out.join("report.json"), &json!({"task": "face", "report": r}))?;
    } else {
        let r = evaluate_pose(&preds, &ds, ds.skeleton())?;
        write_atomic(&a.out.join("curve.csv"), r.pck.curve_csv().as_bytes())?;
        write_json(&a.out.join("report.json"), &json!({"task": "pose2d", "report": r}))?;
    }
    write_atomic(&a.out.join("predictions.jsonl"), jsonl(&image_coords)?.as_bytes())?;
    Ok(())
}

fn eval_3d(a: &EvalArgs) -> CliResult<()> {
    let spec = read_skeleton(&a.data)?;
    let pairs = read_pairs(&pairs_path(&a.data))?;
    let data = PairedData::new(&pairs, &spec, 0.0, 0)?;
    let preds: Vec<Vec<[f64; 3]>> = match (&a.model, &a.predictions) {
        (Some(m), _) => {
            let (model, _, _) = load_lifter(m)?;
            model.lift_batch(&data.poses2d)?
        }
        (None, Some(p)) => {
            let rows: Vec<Prediction3d> = read_jsonl(p)?;
            if rows.len() != data.len() {
                return Err(structpose::Error::invalid(format!("{} predictions for {} samples", rows.len(), data.len())).into());
            }
            rows.into_iter().map(|r| r.coords3d).collect()
        }
        (None, None) => unreachable!("clap requires --model or --predictions"),
    };
    let r = evaluate_lift(&preds, &data, &spec)?;
    let mut report = json!({
        "task": "lift3d",
        "samples": r.samples,
        "plausibility": r.plausibility,
    });
    let mut csv = String::from("joint");
    let chosen: Vec<(u8, &structpose::metrics::MetricReport)> = [(1u8, &r.protocol1), (2u8, &r.protocol2)]
        .into_iter()
        .filter(|(p, _)| a.protocol.map_or(true, |q| q == *p))
        .collect();
    for (p, m) in &chosen {
        report[format!("protocol{p}")] = serde_json::to_value(m)?;
        csv.push_str(&format!(",mpjpe_p{p}"));
    }
    csv.push('\n');
    for j in 0..spec.joints() {
        csv.push_str(&spec.names[j]);
        for (_, m) in &chosen {
            csv.push_str(&format!(",{}", m.per_joint[j]));
        }
        csv.push('\n');
    }
    create_out(&a.out)?;
    write_json(&a.out.join("report.json"), &report)?;
    write_atomic(&a.out.join("per_joint.csv"), csv.as_bytes())?;
    if a.model.is_some() {
        let rows: Vec<Prediction3d> = preds.into_iter().map(|coords3d| Prediction3d { coords3d }).collect();
        write_atomic(&a.out.join("predictions3d.jsonl"), jsonl(&rows)?.as_bytes())?;
    }
    Ok(())
}

#[derive(Deserialize)]
struct Input2d {
    coords2d: Vec<[f64; 2]>,
}

fn lift(a: LiftArgs) -> CliResult<()> {
    let started = Instant::now();
    require(&a.model, "model")?;
    let src = pairs_path(&a.input);
    require(&src, "input")?;
    let inputs = vec![input("model", &a.model)?, input("input", &src)?];
    let (model, _, _) = load_lifter(&a.model)?;
    let rows: Vec<Input2d> = read_jsonl(&src)?;
    let poses: Vec<Vec<[f64; 2]>> = rows.into_iter().map(|r| r.coords2d).collect();
    let preds = model.lift_batch(&poses)?;
    let out: Vec<Prediction3d> = preds.into_iter().map(|coords3d| Prediction3d { coords3d }).collect();
    create_out(&a.out)?;
    write_atomic(&a.out.join("predictions3d.jsonl"), jsonl(&out)?.as_bytes())?;
    let m = RunManifest::new("lift", None, None, inputs);
    m.finish(&a.out, started.elapsed().as_secs_f64())?;
    tracing::info!(command = "lift", poses = out.len(), out = %a.out.display(), "done");
    Ok(())
}

fn plot(a: PlotArgs) -> CliResult<()> {
    if !a.labels.is_empty() && a.labels.len() != a.csv.len() {
        return Err(CliError::usage("--label must be given once per --csv or not at all"));
    }
    let mut series = Vec::new();
    let mut axes = None;
    for (i, p) in a.csv.iter().enumerate() {
        require(p, "curve")?;
        let text = fs::read_to_string(p).map_err(|e| CliError::io(p.display().to_string(), e))?;
        let (ax, points) = read_curve(&text)?;
        axes.get_or_insert(ax);
        let label = a
            .labels
            .get(i)
            .cloned()
            .unwrap_or_else(|| p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
        series.push(Series { label, points });
    }
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_out(dir)?;
    }
    write_plot(&series, &axes.expect("at least one csv"), &a.title, &a.out)?;
    tracing::info!(command = "plot", series = series.len(), out = %a.out.display(), "done");
    Ok(())
}
