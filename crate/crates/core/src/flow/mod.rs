//! Dense optical flow between consecutive grayscale frames.
//!
//! The estimator is a coarse-to-fine TV-L1 primal-dual solver (see
//! [`tvl1`]); flow fields can be exchanged as Middlebury `.flo` files
//! through [`read_flo`] and [`write_flo`].

mod flo;
mod tvl1;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub use flo::{read_flo, write_flo, FLO_MAGIC};
pub use tvl1::{flow_energy, LevelTrace};

pub const MIN_FRAME_SIDE: usize = 8;

/// A grayscale frame with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
}

impl Frame {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if width < MIN_FRAME_SIDE || height < MIN_FRAME_SIDE {
            return Err(invalid(format!("frame {width}x{height} is smaller than {MIN_FRAME_SIDE}x{MIN_FRAME_SIDE}")));
        }
        if pixels.len() != width * height {
            return Err(invalid(format!(
                "frame {width}x{height} expects {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        if let Some(i) = pixels.iter().position(|p| !p.is_finite()) {
            return Err(invalid(format!("non-finite pixel at index {i}")));
        }
        if let Some(i) = pixels.iter().position(|p| !(0.0..=1.0).contains(p)) {
            return Err(invalid(format!("pixel {i} outside [0, 1]: {}", pixels[i])));
        }
        Ok(Self { width, height, pixels })
    }

    /// Builds a frame from 8-bit luma samples.
    pub fn from_luma8(width: usize, height: usize, luma: &[u8]) -> Result<Self> {
        Self::new(width, height, luma.iter().map(|&v| f32::from(v) / 255.0).collect())
    }

    /// Builds a frame from interleaved 8-bit RGB, converting with
    /// `0.299 R + 0.587 G + 0.114 B`.
    pub fn from_rgb8(width: usize, height: usize, rgb: &[u8]) -> Result<Self> {
        if rgb.len() != width * height * 3 {
            return Err(invalid("rgb buffer length does not match dimensions"));
        }
        let pixels = rgb
            .chunks_exact(3)
            .map(|p| {
                let y = 0.299 * f32::from(p[0]) + 0.587 * f32::from(p[1]) + 0.114 * f32::from(p[2]);
                (y / 255.0).clamp(0.0, 1.0)
            })
            .collect();
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    pub fn to_luma8(&self) -> Vec<u8> {
        self.pixels.iter().map(|&p| (p * 255.0).round() as u8).collect()
    }
}

/// Per-pixel displacement `(u, v)` from one frame to the next, in pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    u: Vec<f32>,
    v: Vec<f32>,
}

impl FlowField {
    pub fn new(width: usize, height: usize, u: Vec<f32>, v: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(invalid("flow field must be non-empty"));
        }
        if u.len() != width * height || v.len() != width * height {
            return Err(invalid("flow component length does not match dimensions"));
        }
        if u.iter().chain(&v).any(|x| !x.is_finite()) {
            return Err(invalid("flow field contains non-finite values"));
        }
        Ok(Self { width, height, u, v })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, u: vec![0.0; width * height], v: vec![0.0; width * height] }
    }

    /// Spatially constant flow, the signature of a pure camera pan.
    pub fn uniform(width: usize, height: usize, du: f32, dv: f32) -> Self {
        Self { width, height, u: vec![du; width * height], v: vec![dv; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn u(&self) -> &[f32] {
        &self.u
    }

    pub fn v(&self) -> &[f32] {
        &self.v
    }

    /// Adds a constant vector to every pixel.
    pub fn offset(&self, du: f32, dv: f32) -> Self {
        Self {
            width: self.width,
            height: self.height,
            u: self.u.iter().map(|x| x + du).collect(),
            v: self.v.iter().map(|x| x + dv).collect(),
        }
    }

    pub fn scaled(&self, s: f32) -> Self {
        Self {
            width: self.width,
            height: self.height,
            u: self.u.iter().map(|x| x * s).collect(),
            v: self.v.iter().map(|x| x * s).collect(),
        }
    }

    /// Mean Euclidean distance to the constant flow `(du, dv)`, over pixels
    /// at least `margin` away from every border.
    pub fn mean_endpoint_error(&self, du: f32, dv: f32, margin: usize) -> f64 {
        let mut sum = 0.0f64;
        let mut n = 0usize;
        for y in margin..self.height.saturating_sub(margin) {
            for x in margin..self.width.saturating_sub(margin) {
                let i = y * self.width + x;
                let eu = f64::from(self.u[i] - du);
                let ev = f64::from(self.v[i] - dv);
                sum += (eu * eu + ev * ev).sqrt();
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }

    /// Mean endpoint norm over every pixel.
    pub fn mean_magnitude(&self) -> f64 {
        self.mean_endpoint_error(0.0, 0.0, 0)
    }
}

/// TV-L1 solver parameters.
///
/// `lambda_data` weighs the data term for intensities on a 0–255 scale; the
/// solver rescales `[0, 1]` frames internally.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    /// Upper bound on pyramid levels; fewer are used once a level's short
    /// side would drop below [`FlowConfig::MIN_LEVEL_SIDE`].
    pub pyramid_levels: usize,
    pub pyramid_scale: f64,
    pub warps_per_level: usize,
    pub inner_iterations: usize,
    pub lambda_data: f64,
    pub theta: f64,
    pub tau: f64,
    pub stop_epsilon: f64,
    /// 3x3 median filter on the flow after each warp.
    pub median_filter: bool,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            pyramid_levels: 5,
            pyramid_scale: 0.5,
            warps_per_level: 5,
            inner_iterations: 30,
            lambda_data: 0.15,
            theta: 0.3,
            tau: 0.25,
            stop_epsilon: 1e-3,
            median_filter: true,
        }
    }
}

impl FlowConfig {
    pub const MIN_LEVEL_SIDE: usize = 16;

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("pyramid_scale", self.pyramid_scale),
            ("lambda_data", self.lambda_data),
            ("theta", self.theta),
            ("tau", self.tau),
            ("stop_epsilon", self.stop_epsilon),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(invalid(format!("flow config: {name} must be positive, got {v}")));
            }
        }
        if self.pyramid_levels == 0 || self.warps_per_level == 0 || self.inner_iterations == 0 {
            return Err(invalid("flow config: level, warp and iteration counts must be positive"));
        }
        if self.pyramid_scale >= 1.0 {
            return Err(invalid("flow config: pyramid_scale must be below 1"));
        }
        if self.tau * self.theta > 0.125 {
            return Err(invalid(format!("flow config: tau*theta = {} exceeds 1/8", self.tau * self.theta)));
        }
        Ok(())
    }

    /// Level sizes from finest to coarsest for a `width x height` frame.
    pub fn level_sizes(&self, width: usize, height: usize) -> Vec<(usize, usize)> {
        let mut sizes = vec![(width, height)];
        while sizes.len() < self.pyramid_levels {
            let (w, h) = *sizes.last().unwrap();
            let nw = (w as f64 * self.pyramid_scale + 0.5) as usize;
            let nh = (h as f64 * self.pyramid_scale + 0.5) as usize;
            if nw.min(nh) < Self::MIN_LEVEL_SIDE {
                break;
            }
            sizes.push((nw, nh));
        }
        sizes
    }
}

fn check_pair(prev: &Frame, next: &Frame) -> Result<()> {
    if prev.width != next.width || prev.height != next.height {
        return Err(invalid(format!(
            "frame dimensions differ: {}x{} vs {}x{}",
            prev.width, prev.height, next.width, next.height
        )));
    }
    Ok(())
}

/// Estimates the flow carrying `prev` onto `next`: `next(x + u) ≈ prev(x)`.
pub fn estimate_flow(prev: &Frame, next: &Frame, cfg: &FlowConfig) -> Result<FlowField> {
    estimate_flow_traced(prev, next, cfg).map(|(f, _)| f)
}

/// Like [`estimate_flow`], also returning the TV-L1 energy after each warp
/// of every pyramid level (coarsest level first).
pub fn estimate_flow_traced(prev: &Frame, next: &Frame, cfg: &FlowConfig) -> Result<(FlowField, Vec<LevelTrace>)> {
    check_pair(prev, next)?;
    cfg.validate()?;
    let (u, v, trace) = tvl1::solve(prev, next, cfg);
    Ok((FlowField::new(prev.width, prev.height, u, v)?, trace))
}

/// Flow for every consecutive pair of a clip; field `i` maps frame `i` to
/// frame `i + 1`. Pairs are solved in parallel with identical results to a
/// sequential run.
pub fn clip_flows(frames: &[Frame], cfg: &FlowConfig) -> Result<Vec<FlowField>> {
    if frames.len() < 2 {
        return Err(invalid(format!("need at least 2 frames, got {}", frames.len())));
    }
    cfg.validate()?;
    for pair in frames.windows(2) {
        check_pair(&pair[0], &pair[1])?;
    }
    frames.par_windows(2).map(|pair| estimate_flow(&pair[0], &pair[1], cfg)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texture(w: usize, h: usize, shift: (i64, i64)) -> Frame {
        // periodic band-limited pattern, exact under circular shifts
        let px = |x: i64, y: i64| {
            let (xf, yf) = (x as f64, y as f64);
            let tau = std::f64::consts::TAU;
            let a = (tau * 3.0 * xf / w as f64 + 0.3).sin();
            let b = (tau * 2.0 * yf / h as f64 + 1.1).cos();
            let c = (tau * (4.0 * xf / w as f64 + 5.0 * yf / h as f64) + 0.7).sin();
            (0.5 + 0.18 * a + 0.15 * b + 0.12 * c) as f32
        };
        let pixels = (0..h as i64)
            .flat_map(|y| (0..w as i64).map(move |x| (x, y)))
            .map(|(x, y)| px((x - shift.0).rem_euclid(w as i64), (y - shift.1).rem_euclid(h as i64)))
            .collect();
        Frame::new(w, h, pixels).unwrap()
    }

    #[test]
    fn identical_frames_give_zero_flow() {
        let f = texture(48, 40, (0, 0));
        let flow = estimate_flow(&f, &f, &FlowConfig::default()).unwrap();
        assert!(flow.u().iter().chain(flow.v()).all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn constant_frames_give_zero_flow() {
        let a = Frame::new(32, 32, vec![0.4; 32 * 32]).unwrap();
        let b = Frame::new(32, 32, vec![0.6; 32 * 32]).unwrap();
        let flow = estimate_flow(&a, &b, &FlowConfig::default()).unwrap();
        assert!(flow.u().iter().chain(flow.v()).all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn recovers_circular_shift() {
        for s in [(1, 0), (2, 0), (0, 2), (-2, 1)] {
            let a = texture(64, 64, (0, 0));
            let b = texture(64, 64, s);
            let flow = estimate_flow(&a, &b, &FlowConfig::default()).unwrap();
            let epe = flow.mean_endpoint_error(s.0 as f32, s.1 as f32, 8);
            assert!(epe < 0.3, "shift {s:?}: epe {epe}");
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let a = texture(32, 32, (0, 0));
        let b = texture(32, 24, (0, 0));
        assert!(matches!(estimate_flow(&a, &b, &FlowConfig::default()), Err(crate::Error::InvalidInput(_))));
    }

    #[test]
    fn non_finite_pixels_are_rejected() {
        let mut p = vec![0.5; 64];
        p[10] = f32::NAN;
        assert!(Frame::new(8, 8, p).is_err());
        assert!(Frame::new(4, 8, vec![0.5; 32]).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = FlowConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.tau = 0.5;
        assert!(cfg.validate().is_err());
        let cfg = FlowConfig { pyramid_scale: 1.0, ..FlowConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn pyramid_stops_before_sixteen() {
        let cfg = FlowConfig::default();
        assert_eq!(cfg.level_sizes(64, 64), vec![(64, 64), (32, 32), (16, 16)]);
        assert_eq!(cfg.level_sizes(224, 224).len(), 4);
        assert_eq!(cfg.level_sizes(20, 20), vec![(20, 20)]);
    }

    #[test]
    fn clip_flow_counts() {
        let f = texture(32, 32, (0, 0));
        let frames = vec![f.clone(); 16];
        let flows = clip_flows(&frames, &FlowConfig::default()).unwrap();
        assert_eq!(flows.len(), 15);
        assert!(flows.iter().all(|fl| fl.mean_magnitude() < 1e-2));
        assert_eq!(clip_flows(&frames[..2], &FlowConfig::default()).unwrap().len(), 1);
        assert!(clip_flows(&frames[..1], &FlowConfig::default()).is_err());
    }

    #[test]
    fn constant_velocity_pan() {
        let frames: Vec<Frame> = (0..3).map(|t| texture(64, 64, (t, 0))).collect();
        let flows = clip_flows(&frames, &FlowConfig::default()).unwrap();
        for fl in &flows {
            assert!(fl.mean_endpoint_error(1.0, 0.0, 8) < 0.3);
        }
    }

    #[test]
    fn parallel_matches_sequential() {
        let frames: Vec<Frame> = (0..4).map(|t| texture(32, 32, (t, -t))).collect();
        let par = clip_flows(&frames, &FlowConfig::default()).unwrap();
        let seq: Vec<FlowField> =
            frames.windows(2).map(|p| estimate_flow(&p[0], &p[1], &FlowConfig::default()).unwrap()).collect();
        assert_eq!(par, seq);
    }

    #[test]
    fn rgb_uses_rec601_luma() {
        let rgb: Vec<u8> = [255u8, 0, 0].repeat(64);
        let f = Frame::from_rgb8(8, 8, &rgb).unwrap();
        assert!((f.get(0, 0) - 0.299).abs() < 1e-6);
    }
}
