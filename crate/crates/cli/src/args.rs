use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mofo_core::clip::TubeDims;
use mofo_core::flow::FlowConfig;
use mofo_core::motionmap::SmoothConfig;
use mofo_core::tinynet::NetConfig;
use serde::{Deserialize, Serialize};

#[derive(Parser, Clone, Debug, Serialize, Deserialize)]
#[command(name = "mofo", version, about = "Motion-focused tube masking pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "subcommand", rename_all = "lowercase")]
pub enum Command {
    /// Optical flow between consecutive frames (flow_%05d.flo).
    Flow(FlowCmd),
    /// Smoothed motion-boundary maps (motion_%05d.pgm and .f32).
    Motionmap(MotionmapCmd),
    /// Per-frame and per-clip motion boxes (boxes.json).
    Box(BoxCmd),
    /// A motion-aware tube mask (mask.json).
    Mask(MaskCmd),
    /// Masked-autoencoder pretraining on a scene manifest.
    Pretrain(PretrainCmd),
    /// Cross-attention classifier finetuning on a labelled manifest.
    Finetune(FinetuneCmd),
    /// Motion-box detection against ground truth (report.json, report.csv).
    Eval(EvalCmd),
    /// Inside-ratio sweep of pretraining (sweep.csv).
    Sweep(SweepCmd),
    /// Writes a synthetic scene manifest (suite.json).
    Suite(SuiteCmd),
    /// Renders a manifest to frame directories.
    Render(RenderCmd),
    /// Reruns the command recorded in a run manifest.
    Replay(ReplayCmd),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Flow(_) => "flow",
            Command::Motionmap(_) => "motionmap",
            Command::Box(_) => "box",
            Command::Mask(_) => "mask",
            Command::Pretrain(_) => "pretrain",
            Command::Finetune(_) => "finetune",
            Command::Eval(_) => "eval",
            Command::Sweep(_) => "sweep",
            Command::Suite(_) => "suite",
            Command::Render(_) => "render",
            Command::Replay(_) => "replay",
        }
    }

    /// Output flags; replay has none of its own.
    pub fn output_mut(&mut self) -> Option<&mut Output> {
        match self {
            Command::Flow(c) => Some(&mut c.output),
            Command::Motionmap(c) => Some(&mut c.output),
            Command::Box(c) => Some(&mut c.output),
            Command::Mask(c) => Some(&mut c.output),
            Command::Pretrain(c) => Some(&mut c.output),
            Command::Finetune(c) => Some(&mut c.output),
            Command::Eval(c) => Some(&mut c.output),
            Command::Sweep(c) => Some(&mut c.output),
            Command::Suite(c) => Some(&mut c.output),
            Command::Render(c) => Some(&mut c.output),
            Command::Replay(_) => None,
        }
    }
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct Output {
    /// Output directory; created if missing.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct FlowArgs {
    #[arg(long, default_value_t = 5)]
    pub levels: usize,
    #[arg(long, default_value_t = 0.5)]
    pub pyramid_scale: f64,
    #[arg(long, default_value_t = 5)]
    pub warps: usize,
    #[arg(long, default_value_t = 30)]
    pub iterations: usize,
    #[arg(long, default_value_t = 0.15)]
    pub lambda: f64,
    #[arg(long, default_value_t = 0.3)]
    pub theta: f64,
    #[arg(long, default_value_t = 0.25)]
    pub tau: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub epsilon: f64,
    /// Skip the median filter applied after each warp.
    #[arg(long)]
    pub no_median: bool,
}

impl FlowArgs {
    pub fn config(&self) -> FlowConfig {
        FlowConfig {
            pyramid_levels: self.levels,
            pyramid_scale: self.pyramid_scale,
            warps_per_level: self.warps,
            inner_iterations: self.iterations,
            lambda_data: self.lambda,
            theta: self.theta,
            tau: self.tau,
            stop_epsilon: self.epsilon,
            median_filter: !self.no_median,
        }
    }
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct SmoothArgs {
    /// Gaussian smoothing of the motion map.
    #[arg(long, default_value_t = 2.0)]
    pub sigma: f64,
    /// Defaults to max(2*ceil(sigma), ceil(2.5*sigma)).
    #[arg(long)]
    pub kernel_radius: Option<usize>,
}

impl SmoothArgs {
    pub fn config(&self) -> SmoothConfig {
        let auto = || SmoothConfig::with_sigma(self.sigma).kernel_radius.max((2.5 * self.sigma).ceil() as usize);
        SmoothConfig { sigma: self.sigma, kernel_radius: self.kernel_radius.unwrap_or_else(auto) }
    }
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct MaskArgs {
    /// Share of spatial tube cells masked.
    #[arg(long, default_value_t = 0.9)]
    pub mask_ratio: f64,
    /// Share of in-box cells that must be masked.
    #[arg(long, default_value_t = 0.75)]
    pub inside_ratio: f64,
    /// Tube size as T,H,W.
    #[arg(long, value_parser = parse_triple, default_value = "4,8,8")]
    pub tube_dims: [usize; 3],
}

impl MaskArgs {
    pub fn tubes(&self) -> TubeDims {
        TubeDims::new(self.tube_dims[0], self.tube_dims[1], self.tube_dims[2])
    }
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct NetArgs {
    #[arg(long, default_value_t = 32)]
    pub d_model: usize,
    #[arg(long, default_value_t = 2)]
    pub depth_enc: usize,
    #[arg(long, default_value_t = 1)]
    pub depth_dec: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    #[arg(long, default_value_t = 4)]
    pub mlp_ratio: usize,
    #[arg(long, default_value_t = 3)]
    pub mca_heads: usize,
    #[arg(long, default_value_t = 1)]
    pub mca_depth: usize,
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
}

impl NetArgs {
    pub fn config(&self, clip: mofo_core::clip::ClipDims, tubes: TubeDims) -> NetConfig {
        NetConfig {
            clip_dims: clip,
            channels: 1,
            tube_dims: tubes,
            d_model: self.d_model,
            depth_enc: self.depth_enc,
            depth_dec: self.depth_dec,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            mca_heads: self.mca_heads,
            mca_depth: self.mca_depth,
            classes: self.classes,
        }
    }
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    pub beta2: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub adam_eps: f64,
}

/// Source of the motion boxes used for masking and token partitions.
#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoxSource {
    /// Boxes found by the flow pipeline.
    Detected,
    /// Rendered sprite boxes of the synthetic scene.
    GroundTruth,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct FlowCmd {
    /// Directory of frame_%05d.pgm/ppm files.
    #[arg(long)]
    pub frames: PathBuf,
    #[command(flatten)]
    pub flow: FlowArgs,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct MotionmapCmd {
    #[arg(long)]
    pub frames: PathBuf,
    #[command(flatten)]
    pub flow: FlowArgs,
    #[command(flatten)]
    pub smooth: SmoothArgs,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct BoxCmd {
    #[arg(long)]
    pub frames: PathBuf,
    #[command(flatten)]
    pub flow: FlowArgs,
    #[command(flatten)]
    pub smooth: SmoothArgs,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct MaskCmd {
    /// Frames to detect the motion box from; otherwise give --clip-dims.
    #[arg(long, conflicts_with_all = ["clip_dims", "motion_box"])]
    pub frames: Option<PathBuf>,
    /// Clip size as T,H,W.
    #[arg(long, value_parser = parse_triple, required_unless_present = "frames")]
    pub clip_dims: Option<[usize; 3]>,
    /// Motion box as X0,Y0,X1,Y1; without it the mask is plain random tube masking.
    #[arg(long = "box", value_parser = parse_quad, requires = "clip_dims")]
    pub motion_box: Option<[usize; 4]>,
    #[command(flatten)]
    pub mask: MaskArgs,
    #[command(flatten)]
    pub flow: FlowArgs,
    #[command(flatten)]
    pub smooth: SmoothArgs,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct PretrainCmd {
    /// Scene manifest (JSON list of scene specs).
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub steps: usize,
    /// Start from this checkpoint instead of a fresh initialization.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = BoxSource::Detected)]
    pub boxes: BoxSource,
    #[command(flatten)]
    pub mask: MaskArgs,
    #[command(flatten)]
    pub net: NetArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub flow: FlowArgs,
    #[command(flatten)]
    pub smooth: SmoothArgs,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct FinetuneCmd {
    /// Scene manifest; every scene needs a label.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 300)]
    pub steps: usize,
    /// Pretrained checkpoint to start from.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = BoxSource::Detected)]
    pub boxes: BoxSource,
    #[arg(long, value_parser = parse_triple, default_value = "4,8,8")]
    pub tube_dims: [usize; 3],
    #[command(flatten)]
    pub net: NetArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub flow: FlowArgs,
    #[command(flatten)]
    pub smooth: SmoothArgs,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct EvalCmd {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Finetuned checkpoint; adds classification accuracy on labelled scenes.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub mask: MaskArgs,
    #[command(flatten)]
    pub net: NetArgs,
    #[command(flatten)]
    pub flow: FlowArgs,
    #[command(flatten)]
    pub smooth: SmoothArgs,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct SweepCmd {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Inside ratios to compare.
    #[arg(long, value_delimiter = ',', default_value = "0.70,0.75,0.90,0.95")]
    pub ratios: Vec<f64>,
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
    /// Trailing scenes of the manifest used for the held-out loss.
    #[arg(long, default_value_t = 2)]
    pub held_out: usize,
    #[arg(long, default_value_t = 0.9)]
    pub mask_ratio: f64,
    #[arg(long, value_parser = parse_triple, default_value = "4,8,8")]
    pub tube_dims: [usize; 3],
    #[command(flatten)]
    pub net: NetArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub flow: FlowArgs,
    #[command(flatten)]
    pub smooth: SmoothArgs,
    #[command(flatten)]
    pub output: Output,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SuiteKind {
    /// 64x64 scenes with a moving sprite.
    Detection,
    /// Background-only 64x64 scenes with a camera pan.
    Flow,
    /// Two-class 32x32 left/right sprite scenes.
    Direction,
    /// 32x32 scenes with a slowly drifting sprite.
    Pretrain,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct SuiteCmd {
    #[arg(long, value_enum)]
    pub kind: SuiteKind,
    #[arg(long, default_value_t = 20)]
    pub count: usize,
    /// Frames per scene (flow suites only).
    #[arg(long, default_value_t = 2)]
    pub frames: usize,
    /// Camera pan added to every scene, as DX,DY.
    #[arg(long, value_parser = parse_pair)]
    pub pan: Option<[f64; 2]>,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct RenderCmd {
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct ReplayCmd {
    /// run_manifest.json written by an earlier run.
    #[arg(long)]
    pub run_manifest: PathBuf,
    /// Output directory of the rerun.
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_list<const N: usize, T: std::str::FromStr>(s: &str) -> Result<[T; N], String> {
    let parts: Vec<T> = s
        .split(',')
        .map(|p| p.trim().parse::<T>().map_err(|_| format!("`{p}` is not a valid number")))
        .collect::<Result<_, _>>()?;
    let n = parts.len();
    parts.try_into().map_err(|_| format!("expected {N} comma-separated values, got {n}"))
}

fn parse_triple(s: &str) -> Result<[usize; 3], String> {
    parse_list(s)
}

fn parse_quad(s: &str) -> Result<[usize; 4], String> {
    parse_list(s)
}

fn parse_pair(s: &str) -> Result<[f64; 2], String> {
    parse_list(s)
}
