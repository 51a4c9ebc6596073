use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use mofo_core::boxdetect::{clip_motion_boxes, MotionBox};
use mofo_core::clip::{ClipDims, ClipTensor};
use mofo_core::evalsynth::{
    detection_suite, direction_suite, eval_detection, flow_suite, prepare_clips, pretrain_suite, read_suite,
    render_suite, sweep_inside_ratio, with_pan, write_suite, DetectionConfig, SceneSpec, SweepConfig, Trace,
};
use mofo_core::flow::{clip_flows, write_flo, FlowConfig, FlowField, Frame};
use mofo_core::frames::{read_frames, write_frames, write_pgm};
use mofo_core::masker::{sample_mask, tube_grid, unboxed_grid, MaskPlan};
use mofo_core::motionmap::{gaussian_smooth, motion_map, SmoothConfig};
use mofo_core::rng::{item_seed, sub_seed, tags};
use mofo_core::tinynet::{
    finetune_accuracy, init_params, read_checkpoint, train_finetune, train_pretrain, write_checkpoint, write_trace_csv,
    FinetuneSample, NetConfig, TinyNetParams, TrainConfig,
};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::args::*;
use crate::failure::{Failure, StageExt};

pub const RUN_MANIFEST: &str = "run_manifest.json";

/// Everything needed to repeat a run: the parsed command with every
/// default filled in, plus the configurations derived from it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    pub command: Command,
    pub effective: Value,
}

pub fn run(cli: Cli) -> Result<(), Failure> {
    execute(cli.command)
}

fn execute(mut cmd: Command) -> Result<(), Failure> {
    if let Command::Replay(r) = &cmd {
        return replay(r);
    }
    absolutize_inputs(&mut cmd)?;
    let output = cmd.output_mut().cloned().expect("non-replay commands have outputs");
    let effective = match &cmd {
        Command::Flow(c) => flow(c)?,
        Command::Motionmap(c) => motionmap(c)?,
        Command::Box(c) => boxes(c)?,
        Command::Mask(c) => mask(c)?,
        Command::Pretrain(c) => pretrain(c)?,
        Command::Finetune(c) => finetune(c)?,
        Command::Eval(c) => eval(c)?,
        Command::Sweep(c) => sweep(c)?,
        Command::Suite(c) => suite(c)?,
        Command::Render(c) => render(c)?,
        Command::Replay(_) => unreachable!(),
    };
    let manifest = RunManifest {
        tool: "mofo".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed: output.seed,
        command: cmd,
        effective,
    };
    write_json(&output.out.join(RUN_MANIFEST), &manifest)
}

fn replay(r: &ReplayCmd) -> Result<(), Failure> {
    let stage = "read run manifest";
    let text = fs::read_to_string(&r.run_manifest).stage(stage, Some(&r.run_manifest))?;
    let manifest: RunManifest = serde_json::from_str(&text).stage(stage, Some(&r.run_manifest))?;
    let mut cmd = manifest.command;
    match cmd.output_mut() {
        Some(o) => o.out = r.out.clone(),
        None => return Err(Failure::usage("a run manifest cannot replay another replay")),
    }
    execute(cmd)
}

fn absolutize_inputs(cmd: &mut Command) -> Result<(), Failure> {
    let mut paths: Vec<&mut PathBuf> = Vec::new();
    match cmd {
        Command::Flow(c) => paths.push(&mut c.frames),
        Command::Motionmap(c) => paths.push(&mut c.frames),
        Command::Box(c) => paths.push(&mut c.frames),
        Command::Mask(c) => paths.extend(c.frames.as_mut()),
        Command::Pretrain(c) => {
            paths.push(&mut c.manifest);
            paths.extend(c.init.as_mut());
        }
        Command::Finetune(c) => {
            paths.push(&mut c.manifest);
            paths.extend(c.init.as_mut());
        }
        Command::Eval(c) => {
            paths.push(&mut c.manifest);
            paths.extend(c.checkpoint.as_mut());
        }
        Command::Sweep(c) => paths.push(&mut c.manifest),
        Command::Render(c) => paths.push(&mut c.manifest),
        Command::Suite(_) | Command::Replay(_) => {}
    }
    for p in paths {
        *p = fs::canonicalize(&*p).stage("read input", Some(p))?;
    }
    Ok(())
}

fn create_out(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).stage("write output", Some(dir))
}

fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> mofo_core::Result<()>) -> Result<(), Failure> {
    let mut w = BufWriter::new(File::create(path).stage("write output", Some(path))?);
    f(&mut w).stage("write output", Some(path))?;
    w.flush().stage("write output", Some(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    write_with(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        writeln!(w)?;
        Ok(())
    })
}

fn valid_flow(args: &FlowArgs) -> Result<FlowConfig, Failure> {
    let cfg = args.config();
    cfg.validate().usage()?;
    Ok(cfg)
}

fn valid_smooth(args: &SmoothArgs) -> Result<SmoothConfig, Failure> {
    let cfg = args.config();
    cfg.validate().usage()?;
    Ok(cfg)
}

fn check_ratios(mask_ratio: f64, inside_ratio: f64) -> Result<(), Failure> {
    if !(mask_ratio > 0.0 && mask_ratio <= 1.0) {
        return Err(Failure::usage(format!("--mask-ratio must be in (0, 1], got {mask_ratio}")));
    }
    if !(0.0..=1.0).contains(&inside_ratio) {
        return Err(Failure::usage(format!("--inside-ratio must be in [0, 1], got {inside_ratio}")));
    }
    Ok(())
}

fn valid_train(steps: usize, t: &TrainArgs) -> Result<TrainConfig, Failure> {
    let cfg = TrainConfig { steps, lr: t.lr, beta1: t.beta1, beta2: t.beta2, eps: t.adam_eps };
    cfg.validate().usage()?;
    Ok(cfg)
}

fn load_frames(dir: &Path) -> Result<Vec<Frame>, Failure> {
    let frames = read_frames(dir).stage("read frames", Some(dir))?;
    if frames.len() < 2 {
        return Err(Failure::Stage {
            stage: "read frames",
            path: Some(dir.to_path_buf()),
            message: format!("need at least 2 frames, found {}", frames.len()),
        });
    }
    Ok(frames)
}

fn load_suite(path: &Path) -> Result<Vec<SceneSpec>, Failure> {
    let file = File::open(path).stage("read manifest", Some(path))?;
    let specs = read_suite(file).stage("read manifest", Some(path))?;
    if specs.is_empty() {
        return Err(Failure::usage(format!("manifest {} lists no scenes", path.display())));
    }
    for (i, s) in specs.iter().enumerate() {
        s.validate().map_err(|e| Failure::usage(format!("scene {i} of {}: {e}", path.display())))?;
    }
    Ok(specs)
}

fn suite_dims(specs: &[SceneSpec]) -> Result<ClipDims, Failure> {
    let d = ClipDims::new(specs[0].frames, specs[0].height, specs[0].width);
    match specs.iter().position(|s| ClipDims::new(s.frames, s.height, s.width) != d) {
        Some(i) => Err(Failure::usage(format!("scene {i} differs in size from scene 0"))),
        None => Ok(d),
    }
}

fn valid_net(args: &NetArgs, dims: ClipDims, tubes: [usize; 3]) -> Result<NetConfig, Failure> {
    let tubes = mofo_core::clip::TubeDims::new(tubes[0], tubes[1], tubes[2]);
    let cfg = args.config(dims, tubes);
    cfg.validate().usage()?;
    Ok(cfg)
}

/// Clip tensors of a suite together with the box each one is masked by.
fn suite_clips(
    specs: &[SceneSpec],
    source: BoxSource,
    flow: &FlowConfig,
    smooth: &SmoothConfig,
    seed: u64,
) -> Result<Vec<(ClipTensor, MotionBox)>, Failure> {
    match source {
        BoxSource::Detected => prepare_clips(specs, flow, smooth, seed).stage("detect boxes", None),
        BoxSource::GroundTruth => render_suite(specs, seed)
            .stage("render scenes", None)?
            .into_iter()
            .map(|c| Ok((ClipTensor::from_frames(&c.frames).stage("render scenes", None)?, c.union)))
            .collect(),
    }
}

fn starting_params(init: Option<&Path>, net: &NetConfig, seed: u64) -> Result<TinyNetParams<f32>, Failure> {
    let mut params = init_params(net, sub_seed(seed, tags::INIT)).stage("initialize", None)?;
    if let Some(path) = init {
        let file = File::open(path).stage("load checkpoint", Some(path))?;
        let loaded = read_checkpoint(std::io::BufReader::new(file)).stage("load checkpoint", Some(path))?;
        params.assign_from(&loaded).stage("load checkpoint", Some(path))?;
    }
    Ok(params)
}

fn flow(c: &FlowCmd) -> Result<Value, Failure> {
    let cfg = valid_flow(&c.flow)?;
    let frames = load_frames(&c.frames)?;
    let flows = clip_flows(&frames, &cfg).stage("flow", Some(&c.frames))?;
    create_out(&c.output.out)?;
    write_flows(&c.output.out, &flows)?;
    println!("wrote {} flow fields to {}", flows.len(), c.output.out.display());
    Ok(json!({ "flow": cfg }))
}

fn write_flows(dir: &Path, flows: &[FlowField]) -> Result<(), Failure> {
    for (i, f) in flows.iter().enumerate() {
        write_with(&dir.join(format!("flow_{i:05}.flo")), |w| write_flo(f, w))?;
    }
    Ok(())
}

fn motionmap(c: &MotionmapCmd) -> Result<Value, Failure> {
    let cfg = valid_flow(&c.flow)?;
    let smooth = valid_smooth(&c.smooth)?;
    let frames = load_frames(&c.frames)?;
    let flows = clip_flows(&frames, &cfg).stage("flow", Some(&c.frames))?;
    create_out(&c.output.out)?;
    for (i, f) in flows.iter().enumerate() {
        let m = motion_map(f).and_then(|m| gaussian_smooth(&m, &smooth)).stage("motion map", None)?;
        let pgm = c.output.out.join(format!("motion_{i:05}.pgm"));
        write_pgm(&pgm, m.width(), m.height(), &m.to_luma8()).stage("write output", Some(&pgm))?;
        write_with(&c.output.out.join(format!("motion_{i:05}.f32")), |w| m.write_raw(w))?;
    }
    println!("wrote {} motion maps to {}", flows.len(), c.output.out.display());
    Ok(json!({ "flow": cfg, "smooth": smooth }))
}

fn boxes(c: &BoxCmd) -> Result<Value, Failure> {
    let cfg = valid_flow(&c.flow)?;
    let smooth = valid_smooth(&c.smooth)?;
    let frames = load_frames(&c.frames)?;
    let found = clip_motion_boxes(&frames, &cfg, &smooth).stage("detect boxes", Some(&c.frames))?;
    create_out(&c.output.out)?;
    let report = json!({
        "seed": c.output.seed,
        "width": frames[0].width(),
        "height": frames[0].height(),
        "frames": frames.len(),
        "per_frame": found.per_frame,
        "clip": found.clip,
        "fallback": found.fallback,
    });
    write_json(&c.output.out.join("boxes.json"), &report)?;
    let b = found.clip;
    println!(
        "clip box ({}, {})-({}, {}){}",
        b.x0,
        b.y0,
        b.x1,
        b.y1,
        if found.fallback { " [full-frame fallback]" } else { "" }
    );
    Ok(json!({ "flow": cfg, "smooth": smooth }))
}

fn mask(c: &MaskCmd) -> Result<Value, Failure> {
    check_ratios(c.mask.mask_ratio, c.mask.inside_ratio)?;
    let tubes = c.mask.tubes();
    let (dims, motion_box, source) = match (&c.frames, c.clip_dims) {
        (Some(dir), _) => {
            let cfg = valid_flow(&c.flow)?;
            let smooth = valid_smooth(&c.smooth)?;
            let frames = load_frames(dir)?;
            let found = clip_motion_boxes(&frames, &cfg, &smooth).stage("detect boxes", Some(dir))?;
            let dims = ClipDims::new(frames.len(), frames[0].height(), frames[0].width());
            (dims, Some(found.clip), "detected")
        }
        (None, Some([t, h, w])) => {
            let b = match c.motion_box {
                Some([x0, y0, x1, y1]) => Some(MotionBox::new(x0, y0, x1, y1).usage()?),
                None => None,
            };
            (ClipDims::new(t, h, w), b, if b.is_some() { "flag" } else { "none" })
        }
        (None, None) => return Err(Failure::usage("give --frames or --clip-dims")),
    };
    let in_frames = c.frames.is_some();
    let grid = match &motion_box {
        Some(b) => tube_grid(dims, tubes, b),
        None => unboxed_grid(dims, tubes),
    };
    let grid = if in_frames { grid.stage("tube grid", c.frames.as_deref())? } else { grid.usage()? };
    let seed = sub_seed(c.output.seed, tags::MASK);
    let plan = sample_mask(&grid, c.mask.mask_ratio, c.mask.inside_ratio, seed).usage()?;
    create_out(&c.output.out)?;
    let mut record = serde_json::to_value(&plan).stage("write output", None)?;
    if let Value::Object(m) = &mut record {
        m.insert("clip_dims".into(), json!([dims.t, dims.h, dims.w]));
        m.insert("tube_dims".into(), json!(c.mask.tube_dims));
        m.insert("motion_box".into(), json!(motion_box));
        m.insert("box_source".into(), json!(source));
        m.insert("run_seed".into(), json!(c.output.seed));
    }
    write_json(&c.output.out.join("mask.json"), &record)?;
    println!(
        "masked {} of {} spatial cells ({} of {} inside the box)",
        plan.spatial_masked(),
        grid.spatial_cells(),
        plan.inside_masked(),
        grid.inside_cells()
    );
    let detect = if in_frames { json!({ "flow": c.flow.config(), "smooth": c.smooth.config() }) } else { Value::Null };
    Ok(json!({ "mask_seed": seed, "detection": detect }))
}

fn pretrain(c: &PretrainCmd) -> Result<Value, Failure> {
    check_ratios(c.mask.mask_ratio, c.mask.inside_ratio)?;
    let flow = valid_flow(&c.flow)?;
    let smooth = valid_smooth(&c.smooth)?;
    let train = valid_train(c.steps, &c.train)?;
    let specs = load_suite(&c.manifest)?;
    let net = valid_net(&c.net, suite_dims(&specs)?, c.mask.tube_dims)?;
    let seed = c.output.seed;
    let clips = suite_clips(&specs, c.boxes, &flow, &smooth, seed)?;
    let plans: Vec<MaskPlan> = clips
        .iter()
        .enumerate()
        .map(|(i, (_, b))| {
            let grid = tube_grid(net.clip_dims, net.tube_dims, b)?;
            sample_mask(&grid, c.mask.mask_ratio, c.mask.inside_ratio, item_seed(seed, tags::MASK, i as u64))
        })
        .collect::<mofo_core::Result<_>>()
        .stage("mask", None)?;
    let params = starting_params(c.init.as_deref(), &net, seed)?;
    let tensors: Vec<ClipTensor> = clips.into_iter().map(|(t, _)| t).collect();
    let result = train_pretrain(&tensors, &plans, &net, params, &train).stage("pretrain", None)?;
    create_out(&c.output.out)?;
    write_with(&c.output.out.join("checkpoint.mofo"), |w| write_checkpoint(&result.params, w))?;
    write_with(&c.output.out.join("loss.csv"), |w| write_trace_csv(w, &result.loss))?;
    if let (Some(first), Some(last)) = (result.loss.first(), result.loss.last()) {
        println!("pretrain loss {first:.6} -> {last:.6} over {} steps", result.loss.len());
    }
    Ok(json!({ "net": net, "train": train, "flow": flow, "smooth": smooth, "init_seed": sub_seed(seed, tags::INIT) }))
}

fn labelled(specs: &[SceneSpec], classes: usize) -> Result<Vec<usize>, Failure> {
    specs
        .iter()
        .enumerate()
        .map(|(i, s)| match s.label {
            Some(l) if l < classes => Ok(l),
            Some(l) => Err(Failure::usage(format!("scene {i} has label {l} but the net has {classes} classes"))),
            None => Err(Failure::usage(format!("scene {i} has no label"))),
        })
        .collect()
}

fn finetune(c: &FinetuneCmd) -> Result<Value, Failure> {
    let flow = valid_flow(&c.flow)?;
    let smooth = valid_smooth(&c.smooth)?;
    let train = valid_train(c.steps, &c.train)?;
    let specs = load_suite(&c.manifest)?;
    let net = valid_net(&c.net, suite_dims(&specs)?, c.tube_dims)?;
    let labels = labelled(&specs, net.classes)?;
    let seed = c.output.seed;
    let samples: Vec<FinetuneSample> = suite_clips(&specs, c.boxes, &flow, &smooth, seed)?
        .into_iter()
        .zip(labels)
        .map(|((clip, b), label)| {
            Ok(FinetuneSample { clip, grid: tube_grid(net.clip_dims, net.tube_dims, &b)?, label })
        })
        .collect::<mofo_core::Result<_>>()
        .stage("tube grid", None)?;
    let params = starting_params(c.init.as_deref(), &net, seed)?;
    let result = train_finetune(&samples, &net, params, &train).stage("finetune", None)?;
    create_out(&c.output.out)?;
    write_with(&c.output.out.join("checkpoint.mofo"), |w| write_checkpoint(&result.params, w))?;
    write_with(&c.output.out.join("loss.csv"), |w| write_trace_csv(w, &result.loss))?;
    write_with(&c.output.out.join("accuracy.csv"), |w| write_trace_csv(w, &result.accuracy))?;
    if let Some(acc) = result.accuracy.last() {
        println!("finetune accuracy {acc:.4} after {} steps", result.accuracy.len());
    }
    Ok(json!({ "net": net, "train": train, "flow": flow, "smooth": smooth, "init_seed": sub_seed(seed, tags::INIT) }))
}

fn eval(c: &EvalCmd) -> Result<Value, Failure> {
    check_ratios(c.mask.mask_ratio, c.mask.inside_ratio)?;
    let cfg = DetectionConfig {
        flow: valid_flow(&c.flow)?,
        smooth: valid_smooth(&c.smooth)?,
        tube_dims: c.mask.tubes(),
        mask_ratio: c.mask.mask_ratio,
        inside_ratio: c.mask.inside_ratio,
        seed: c.output.seed,
    };
    let specs = load_suite(&c.manifest)?;
    let classify = match &c.checkpoint {
        Some(path) => {
            let net = valid_net(&c.net, suite_dims(&specs)?, c.mask.tube_dims)?;
            Some((path, net, labelled(&specs, net.classes)?))
        }
        None => None,
    };
    let mut report = eval_detection(&specs, &cfg).stage("detect boxes", Some(&c.manifest))?;
    if let Some((path, net, labels)) = classify {
        let params = starting_params(Some(path), &net, cfg.seed)?;
        let clips = render_suite(&specs, cfg.seed).stage("render scenes", None)?;
        let samples: Vec<FinetuneSample> = clips
            .iter()
            .zip(&report.detection)
            .zip(labels)
            .map(|((clip, row), label)| {
                Ok(FinetuneSample {
                    clip: ClipTensor::from_frames(&clip.frames)?,
                    grid: tube_grid(net.clip_dims, net.tube_dims, &row.detected)?,
                    label,
                })
            })
            .collect::<mofo_core::Result<_>>()
            .stage("classify", None)?;
        let acc = finetune_accuracy(&samples, &net, &params).stage("classify", Some(path))?;
        report.traces.push(Trace { name: "accuracy".into(), values: vec![acc] });
        println!("classification accuracy {acc:.4}");
    }
    create_out(&c.output.out)?;
    write_with(&c.output.out.join("report.json"), |w| report.write_json(w))?;
    write_with(&c.output.out.join("report.csv"), |w| report.write_detection_csv(w))?;
    if let Some(m) = report.mean_iou {
        println!("mean IoU {m:.4} over {} clips", report.detection.len());
    }
    Ok(json!({ "detection": cfg }))
}

fn sweep(c: &SweepCmd) -> Result<Value, Failure> {
    if c.ratios.is_empty() {
        return Err(Failure::usage("--ratios is empty"));
    }
    if let Some(r) = c.ratios.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
        return Err(Failure::usage(format!("inside ratio {r} is outside (0, 1]")));
    }
    check_ratios(c.mask_ratio, 0.0)?;
    let specs = load_suite(&c.manifest)?;
    if c.held_out == 0 || c.held_out >= specs.len() {
        return Err(Failure::usage(format!("--held-out {} must be in 1..{}", c.held_out, specs.len())));
    }
    let cfg = SweepConfig {
        net: valid_net(&c.net, suite_dims(&specs)?, c.tube_dims)?,
        train: valid_train(c.steps, &c.train)?,
        overall_ratio: c.mask_ratio,
        flow: valid_flow(&c.flow)?,
        smooth: valid_smooth(&c.smooth)?,
        held_out: c.held_out,
        seed: c.output.seed,
    };
    let report = sweep_inside_ratio(&c.ratios, &specs, &cfg).stage("sweep", Some(&c.manifest))?;
    create_out(&c.output.out)?;
    write_with(&c.output.out.join("sweep.csv"), |w| report.write_sweep_csv(w))?;
    write_with(&c.output.out.join("report.json"), |w| report.write_json(w))?;
    for row in &report.sweep {
        println!("inside ratio {:.2}: held-out loss {:.6}", row.inside_ratio, row.heldout_loss);
    }
    Ok(json!({ "sweep": cfg }))
}

fn suite(c: &SuiteCmd) -> Result<Value, Failure> {
    if c.count == 0 {
        return Err(Failure::usage("--count must be positive"));
    }
    let seed = c.output.seed;
    let mut specs = match c.kind {
        SuiteKind::Detection => detection_suite(c.count, seed),
        SuiteKind::Flow => Ok(flow_suite(c.count, c.frames, seed)),
        SuiteKind::Direction => direction_suite(c.count, seed),
        SuiteKind::Pretrain => pretrain_suite(c.count, seed),
    }
    .stage("build suite", None)?;
    if let Some([dx, dy]) = c.pan {
        specs = with_pan(&specs, (dx, dy));
        for (i, s) in specs.iter().enumerate() {
            s.validate().map_err(|e| Failure::usage(format!("scene {i} with pan ({dx}, {dy}): {e}")))?;
        }
    }
    create_out(&c.output.out)?;
    write_with(&c.output.out.join("suite.json"), |w| write_suite(w, &specs))?;
    println!("wrote {} scenes to {}", specs.len(), c.output.out.join("suite.json").display());
    Ok(json!({ "scenes": specs.len() }))
}

fn render(c: &RenderCmd) -> Result<Value, Failure> {
    let specs = load_suite(&c.manifest)?;
    let clips = render_suite(&specs, c.output.seed).stage("render scenes", Some(&c.manifest))?;
    create_out(&c.output.out)?;
    let mut truth = Vec::with_capacity(clips.len());
    for (i, (clip, spec)) in clips.iter().zip(&specs).enumerate() {
        let dir = c.output.out.join(format!("clip_{i:03}"));
        write_frames(&dir, &clip.frames).stage("write output", Some(&dir))?;
        truth.push(json!({ "clip": i, "label": spec.label, "boxes": clip.boxes, "union": clip.union }));
    }
    write_json(&c.output.out.join("ground_truth.json"), &json!({ "seed": c.output.seed, "clips": truth }))?;
    println!("rendered {} clips to {}", clips.len(), c.output.out.display());
    Ok(json!({ "scenes": specs.len() }))
}
