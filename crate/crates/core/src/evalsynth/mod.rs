//! Synthetic scenes with known ground truth and the evaluation harnesses
//! built on them.
//!
//! Scenes are square sprites with their own texture moving over a
//! band-limited background; a camera pan translates the whole picture.
//! [`eval_detection`] scores automatic motion boxes against the rendered
//! sprite boxes and [`sweep_inside_ratio`] pretrains the small network at
//! several inside masking ratios.

mod scene;
mod texture;

use std::f64::consts::TAU;
use std::io::{Read, Write};

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use scene::{gen_clip, GeneratedClip, SceneSpec};
pub use texture::Texture;

use crate::boxdetect::{clip_motion_boxes, iou, MotionBox};
use crate::clip::{ClipTensor, TubeDims};
use crate::error::{invalid, Result};
use crate::flow::FlowConfig;
use crate::masker::{budget, inside_minimum, sample_mask, tube_grid, unboxed_grid, MaskPlan};
use crate::motionmap::SmoothConfig;
use crate::rng::{item_seed, rng_from_seed, sub_seed, tags};
use crate::tinynet::{init_params, mae_forward, train_pretrain, NetConfig, TrainConfig};

/// Camera pan of the panned detection suite, pixels per frame.
pub const DETECTION_PAN: (f64, f64) = (2.0, 0.0);

fn base_spec(width: usize, height: usize, frames: usize, sprite: usize, seed: u64, i: u64) -> SceneSpec {
    SceneSpec {
        width,
        height,
        frames,
        sprite_size: sprite,
        sprite_seed: item_seed(seed, tags::SCENE, 2 * i),
        start: (0.0, 0.0),
        velocity: (0.0, 0.0),
        background_seed: item_seed(seed, tags::SCENE, 2 * i + 1),
        pan: (0.0, 0.0),
        noise_sigma: 0.0,
        label: None,
        flat: false,
    }
}

/// Picks a start so the trajectory fits for every listed pan.
fn place(spec: &mut SceneSpec, pans: &[(f64, f64)], rng: &mut crate::rng::Rng) -> Result<()> {
    for _ in 0..1000 {
        spec.start = (
            rng.random_range(0.0..(spec.width - spec.sprite_size) as f64).floor(),
            rng.random_range(0.0..(spec.height - spec.sprite_size) as f64).floor(),
        );
        let fits = pans.iter().all(|&pan| SceneSpec { pan, ..spec.clone() }.validate().is_ok());
        if fits {
            return Ok(());
        }
    }
    Err(crate::error::Error::InvalidSpec("no start position keeps the sprite in frame".into()))
}

/// `count` 64x64x8 scenes with a 16 px sprite moving at 2 px/frame in a
/// random direction. Starts are chosen so the suite also renders with
/// [`DETECTION_PAN`].
pub fn detection_suite(count: usize, seed: u64) -> Result<Vec<SceneSpec>> {
    let mut rng = rng_from_seed(sub_seed(seed, tags::SCENE));
    (0..count as u64)
        .map(|i| {
            let mut s = base_spec(64, 64, 8, 16, seed, i);
            let a = rng.random_range(0.0..TAU);
            s.velocity = (2.0 * a.cos(), 2.0 * a.sin());
            place(&mut s, &[(0.0, 0.0), DETECTION_PAN], &mut rng)?;
            Ok(s)
        })
        .collect()
}

pub fn with_pan(specs: &[SceneSpec], pan: (f64, f64)) -> Vec<SceneSpec> {
    specs.iter().map(|s| SceneSpec { pan, ..s.clone() }).collect()
}

/// Background-only 64x64 scenes whose camera pans by `(±2, ±2)` px/frame;
/// the true flow of every pair is the pan.
pub fn flow_suite(count: usize, frames: usize, seed: u64) -> Vec<SceneSpec> {
    let mut rng = rng_from_seed(sub_seed(seed, tags::SCENE));
    (0..count as u64)
        .map(|i| {
            let mut s = base_spec(64, 64, frames, 0, seed, i);
            let sx = if rng.random_bool(0.5) { 2.0 } else { -2.0 };
            let sy = if rng.random_bool(0.5) { 2.0 } else { -2.0 };
            s.pan = (sx, sy);
            s
        })
        .collect()
}

/// Two-class 32x32x8 scenes: label 0 moves left, label 1 moves right, at
/// 2 px/frame. Classes alternate.
pub fn direction_suite(count: usize, seed: u64) -> Result<Vec<SceneSpec>> {
    let mut rng = rng_from_seed(sub_seed(seed, tags::SCENE));
    (0..count as u64)
        .map(|i| {
            let mut s = base_spec(32, 32, 8, 8, seed, i);
            let label = (i % 2) as usize;
            s.velocity = (if label == 1 { 2.0 } else { -2.0 }, 0.0);
            s.label = Some(label);
            place(&mut s, &[(0.0, 0.0)], &mut rng)?;
            Ok(s)
        })
        .collect()
}

/// 32x32x8 scenes with an 8 px sprite drifting at up to 1 px/frame.
pub fn pretrain_suite(count: usize, seed: u64) -> Result<Vec<SceneSpec>> {
    let mut rng = rng_from_seed(sub_seed(seed, tags::SCENE));
    (0..count as u64)
        .map(|i| {
            let mut s = base_spec(32, 32, 8, 8, seed, i);
            s.velocity = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            place(&mut s, &[(0.0, 0.0)], &mut rng)?;
            Ok(s)
        })
        .collect()
}

pub fn read_suite<R: Read>(r: R) -> Result<Vec<SceneSpec>> {
    Ok(serde_json::from_reader(r)?)
}

pub fn write_suite<W: Write>(w: W, specs: &[SceneSpec]) -> Result<()> {
    Ok(serde_json::to_writer_pretty(w, specs)?)
}

/// Renders every scene; clip `i` draws its noise from its own sub-seed.
pub fn render_suite(specs: &[SceneSpec], seed: u64) -> Result<Vec<GeneratedClip>> {
    specs.par_iter().enumerate().map(|(i, s)| gen_clip(s, item_seed(seed, tags::SCENE, i as u64))).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionConfig {
    pub flow: FlowConfig,
    pub smooth: SmoothConfig,
    /// Tube size of the masking audit.
    pub tube_dims: TubeDims,
    pub mask_ratio: f64,
    pub inside_ratio: f64,
    pub seed: u64,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self {
            flow: FlowConfig::default(),
            smooth: SmoothConfig::default(),
            tube_dims: TubeDims::new(4, 8, 8),
            mask_ratio: 0.9,
            inside_ratio: 0.75,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRow {
    pub clip: usize,
    pub detected: MotionBox,
    pub ground_truth: MotionBox,
    pub iou: f64,
    pub fallback: bool,
}

/// Counts of one sampled mask next to what the counting rule demands.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskAudit {
    pub clip: usize,
    pub spatial_cells: usize,
    pub inside_cells: usize,
    pub budget: usize,
    pub required_inside: usize,
    pub masked_spatial: usize,
    pub masked_inside: usize,
    pub pass: bool,
}

impl MaskAudit {
    pub fn of(clip: usize, plan: &MaskPlan) -> Self {
        let s = plan.spatial.len();
        let s_in = plan.inside.iter().filter(|&&b| b).count();
        let b = budget(plan.overall_ratio, s);
        let required = inside_minimum(plan.inside_ratio, s_in).min(b);
        let (masked, inside) = (plan.spatial_masked(), plan.inside_masked());
        Self {
            clip,
            spatial_cells: s,
            inside_cells: s_in,
            budget: b,
            required_inside: required,
            masked_spatial: masked,
            masked_inside: inside,
            pass: masked == b && inside >= required,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub inside_ratio: f64,
    pub overall_ratio: f64,
    pub initial_train_loss: f64,
    pub final_train_loss: f64,
    pub heldout_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub name: String,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: serde_json::Value,
    #[serde(default)]
    pub detection: Vec<DetectionRow>,
    #[serde(default)]
    pub mean_iou: Option<f64>,
    #[serde(default)]
    pub audits: Vec<MaskAudit>,
    #[serde(default)]
    pub sweep: Vec<SweepRow>,
    #[serde(default)]
    pub traces: Vec<Trace>,
}

impl EvalReport {
    pub fn write_json<W: Write>(&self, w: W) -> Result<()> {
        Ok(serde_json::to_writer_pretty(w, self)?)
    }

    /// One row per clip of the detection run.
    pub fn write_detection_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "clip,x0,y0,x1,y1,gt_x0,gt_y0,gt_x1,gt_y1,iou,fallback,audit_pass")?;
        for r in &self.detection {
            let audit = self.audits.iter().find(|a| a.clip == r.clip).map_or("", |a| if a.pass { "1" } else { "0" });
            let (d, g) = (r.detected, r.ground_truth);
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                r.clip,
                d.x0,
                d.y0,
                d.x1,
                d.y1,
                g.x0,
                g.y0,
                g.x1,
                g.y1,
                r.iou,
                u8::from(r.fallback),
                audit
            )?;
        }
        Ok(())
    }

    /// Inside ratio against held-out reconstruction loss, one row per ratio.
    pub fn write_sweep_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "inside_ratio,overall_ratio,initial_train_loss,final_train_loss,heldout_loss")?;
        for r in &self.sweep {
            writeln!(
                w,
                "{},{},{},{},{}",
                r.inside_ratio, r.overall_ratio, r.initial_train_loss, r.final_train_loss, r.heldout_loss
            )?;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.detection.iter().all(|r| r.iou.is_finite())
            && self.mean_iou.map_or(true, f64::is_finite)
            && self.sweep.iter().all(|r| {
                [r.initial_train_loss, r.final_train_loss, r.heldout_loss, r.inside_ratio, r.overall_ratio]
                    .iter()
                    .all(|v| v.is_finite())
            })
            && self.traces.iter().all(|t| t.values.iter().all(|v| v.is_finite()))
    }
}

/// Runs the motion-box pipeline on every scene and scores it against the
/// rendered sprite boxes. A clip without detected motion is scored with
/// the full-frame box it falls back to.
pub fn eval_detection(specs: &[SceneSpec], cfg: &DetectionConfig) -> Result<EvalReport> {
    if specs.is_empty() {
        return Err(invalid("empty suite"));
    }
    let rows: Vec<(DetectionRow, Option<MaskAudit>)> = specs
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let clip = gen_clip(s, item_seed(cfg.seed, tags::SCENE, i as u64))?;
            let boxes = clip_motion_boxes(&clip.frames, &cfg.flow, &cfg.smooth)?;
            let row = DetectionRow {
                clip: i,
                detected: boxes.clip,
                ground_truth: clip.union,
                iou: iou(&boxes.clip, &clip.union),
                fallback: boxes.fallback,
            };
            let dims = crate::clip::ClipDims::new(s.frames, s.height, s.width);
            let audit = match tube_grid(dims, cfg.tube_dims, &boxes.clip) {
                Ok(grid) => {
                    let plan = sample_mask(
                        &grid,
                        cfg.mask_ratio,
                        cfg.inside_ratio,
                        item_seed(cfg.seed, tags::MASK, i as u64),
                    )?;
                    Some(MaskAudit::of(i, &plan))
                }
                Err(_) => None,
            };
            Ok((row, audit))
        })
        .collect::<Result<_>>()?;
    let mean = rows.iter().map(|(r, _)| r.iou).sum::<f64>() / rows.len() as f64;
    let (detection, audits): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
    Ok(EvalReport {
        config: serde_json::to_value(cfg)?,
        detection,
        mean_iou: Some(mean),
        audits: audits.into_iter().flatten().collect(),
        ..EvalReport::default()
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub net: NetConfig,
    pub train: TrainConfig,
    pub overall_ratio: f64,
    pub flow: FlowConfig,
    pub smooth: SmoothConfig,
    /// Trailing clips of the suite kept out of training.
    pub held_out: usize,
    pub seed: u64,
}

impl SweepConfig {
    pub fn micro(seed: u64) -> Self {
        Self {
            net: NetConfig::micro(2),
            train: TrainConfig::with_steps(100),
            overall_ratio: 0.9,
            flow: FlowConfig::default(),
            smooth: SmoothConfig::default(),
            held_out: 2,
            seed,
        }
    }
}

/// Clip tensors and detected motion boxes of a suite.
pub fn prepare_clips(
    specs: &[SceneSpec],
    flow: &FlowConfig,
    smooth: &SmoothConfig,
    seed: u64,
) -> Result<Vec<(ClipTensor, MotionBox)>> {
    specs
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let c = gen_clip(s, item_seed(seed, tags::SCENE, i as u64))?;
            let b = clip_motion_boxes(&c.frames, flow, smooth)?.clip;
            Ok((ClipTensor::from_frames(&c.frames)?, b))
        })
        .collect()
}

/// Pretrains one model per inside ratio from the same initialization and
/// reports the held-out reconstruction loss under plain random tube masks
/// at the same overall ratio.
pub fn sweep_inside_ratio(ratios: &[f64], specs: &[SceneSpec], cfg: &SweepConfig) -> Result<EvalReport> {
    if ratios.is_empty() {
        return Err(invalid("no ratios to sweep"));
    }
    if let Some(r) = ratios.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
        return Err(invalid(format!("inside ratio {r} is outside (0, 1]")));
    }
    if cfg.held_out == 0 || specs.len() <= cfg.held_out {
        return Err(invalid(format!("suite of {} clips cannot hold out {}", specs.len(), cfg.held_out)));
    }
    let net = cfg.net;
    let clips = prepare_clips(specs, &cfg.flow, &cfg.smooth, cfg.seed)?;
    let split = specs.len() - cfg.held_out;
    let (train, test) = clips.split_at(split);
    let init = init_params(&net, sub_seed(cfg.seed, tags::INIT))?;
    let eval_grid = unboxed_grid(net.clip_dims, net.tube_dims)?;
    let eval_plans: Vec<MaskPlan> = (0..test.len())
        .map(|i| sample_mask(&eval_grid, cfg.overall_ratio, 0.0, item_seed(cfg.seed, tags::EVAL, i as u64)))
        .collect::<Result<_>>()?;
    let rows: Vec<(SweepRow, Trace)> = ratios
        .par_iter()
        .map(|&ratio| {
            let plans: Vec<MaskPlan> = train
                .iter()
                .enumerate()
                .map(|(i, (_, b))| {
                    let grid = tube_grid(net.clip_dims, net.tube_dims, b)?;
                    sample_mask(&grid, cfg.overall_ratio, ratio, item_seed(cfg.seed, tags::MASK, i as u64))
                })
                .collect::<Result<_>>()?;
            let tensors: Vec<ClipTensor> = train.iter().map(|(c, _)| c.clone()).collect();
            let res = train_pretrain(&tensors, &plans, &net, init.clone(), &cfg.train)?;
            let mut heldout = 0.0;
            for ((c, _), p) in test.iter().zip(&eval_plans) {
                heldout += mae_forward(c, p, &net, &res.params)?.loss;
            }
            heldout /= test.len() as f64;
            let mut final_loss = 0.0;
            for (c, p) in tensors.iter().zip(&plans) {
                final_loss += mae_forward(c, p, &net, &res.params)?.loss;
            }
            final_loss /= tensors.len() as f64;
            let row = SweepRow {
                inside_ratio: ratio,
                overall_ratio: cfg.overall_ratio,
                initial_train_loss: res.loss.first().copied().unwrap_or(final_loss),
                final_train_loss: final_loss,
                heldout_loss: heldout,
            };
            Ok((row, Trace { name: format!("pretrain_loss@{ratio}"), values: res.loss }))
        })
        .collect::<Result<_>>()?;
    let (sweep, traces) = rows.into_iter().unzip();
    Ok(EvalReport { config: serde_json::to_value(cfg)?, sweep, traces, ..EvalReport::default() })
}
