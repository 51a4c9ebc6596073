//! Motion-boundary maps.
//!
//! A motion map is the per-pixel magnitude of the four spatial derivatives
//! of a flow field, `m = sqrt(ux² + uy² + vx² + vy²)`. Uniform flow, which
//! is what a camera pan produces, has zero derivatives everywhere and so
//! leaves no trace in the map.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::flow::FlowField;

#[derive(Clone, Debug, PartialEq)]
pub struct MotionMap {
    width: usize,
    height: usize,
    m: Vec<f32>,
}

impl MotionMap {
    pub fn new(width: usize, height: usize, m: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || m.len() != width * height {
            return Err(invalid("motion map length does not match dimensions"));
        }
        if m.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(invalid("motion map values must be finite and non-negative"));
        }
        Ok(Self { width, height, m })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f32] {
        &self.m
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.m[y * self.width + x]
    }

    /// Min-max scaled to 0..=255 for viewing; a constant map becomes all zero.
    pub fn to_luma8(&self) -> Vec<u8> {
        let lo = self.m.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = self.m.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let span = hi - lo;
        self.m.iter().map(|&v| if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 }).collect()
    }

    /// Raw dump: `u32` width, `u32` height, then little-endian `f32` values.
    pub fn write_raw<W: Write>(&self, mut sink: W) -> Result<()> {
        let mut buf = Vec::with_capacity(8 + 4 * self.m.len());
        buf.extend_from_slice(&(self.width as u32).to_le_bytes());
        buf.extend_from_slice(&(self.height as u32).to_le_bytes());
        for v in &self.m {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        sink.write_all(&buf)?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothConfig {
    pub sigma: f64,
    pub kernel_radius: usize,
}

impl Default for SmoothConfig {
    fn default() -> Self {
        Self { sigma: 2.0, kernel_radius: 5 }
    }
}

impl SmoothConfig {
    /// Smallest admissible radius for `sigma`.
    pub fn with_sigma(sigma: f64) -> Self {
        Self { sigma, kernel_radius: 2 * sigma.ceil().max(1.0) as usize }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(invalid(format!("sigma must be positive, got {}", self.sigma)));
        }
        let min_radius = 2 * self.sigma.ceil() as usize;
        if self.kernel_radius < min_radius {
            return Err(invalid(format!("kernel_radius {} below 2*ceil(sigma) = {min_radius}", self.kernel_radius)));
        }
        Ok(())
    }

    /// Normalized 1-D kernel of length `2 * kernel_radius + 1`.
    pub fn kernel(&self) -> Vec<f64> {
        let r = self.kernel_radius as i64;
        let mut k: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * self.sigma * self.sigma)).exp()).collect();
        let s: f64 = k.iter().sum();
        k.iter_mut().for_each(|v| *v /= s);
        k
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub dx: Vec<f32>,
    pub dy: Vec<f32>,
}

/// Central differences in the interior, one-sided differences on the
/// borders.
pub fn spatial_gradients(width: usize, height: usize, values: &[f32]) -> Result<Gradients> {
    if width < 3 || height < 3 {
        return Err(invalid(format!("field {width}x{height} is smaller than 3x3")));
    }
    if values.len() != width * height {
        return Err(invalid("field length does not match dimensions"));
    }
    let at = |x: usize, y: usize| values[y * width + x];
    let mut dx = vec![0.0; values.len()];
    let mut dy = vec![0.0; values.len()];
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            dx[i] = match x {
                0 => at(1, y) - at(0, y),
                _ if x == width - 1 => at(x, y) - at(x - 1, y),
                _ => (at(x + 1, y) - at(x - 1, y)) / 2.0,
            };
            dy[i] = match y {
                0 => at(x, 1) - at(x, 0),
                _ if y == height - 1 => at(x, y) - at(x, y - 1),
                _ => (at(x, y + 1) - at(x, y - 1)) / 2.0,
            };
        }
    }
    Ok(Gradients { dx, dy })
}

pub fn motion_map(flow: &FlowField) -> Result<MotionMap> {
    let (w, h) = (flow.width(), flow.height());
    let gu = spatial_gradients(w, h, flow.u())?;
    let gv = spatial_gradients(w, h, flow.v())?;
    let m = (0..w * h)
        .map(|i| {
            let s = f64::from(gu.dx[i]).powi(2)
                + f64::from(gu.dy[i]).powi(2)
                + f64::from(gv.dx[i]).powi(2)
                + f64::from(gv.dy[i]).powi(2);
            s.sqrt() as f32
        })
        .collect();
    MotionMap::new(w, h, m)
}

/// Separable Gaussian blur, x then y, with replicated edges.
pub fn gaussian_smooth(map: &MotionMap, cfg: &SmoothConfig) -> Result<MotionMap> {
    cfg.validate()?;
    let k = cfg.kernel();
    let r = cfg.kernel_radius as isize;
    let (w, h) = (map.width as isize, map.height as isize);
    let src: Vec<f64> = map.m.iter().map(|&v| f64::from(v)).collect();
    let mut tmp = vec![0.0f64; src.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let xs = (x + j as isize - r).clamp(0, w - 1);
                acc += kv * src[(y * w + xs) as usize];
            }
            tmp[(y * w + x) as usize] = acc;
        }
    }
    let mut out = vec![0.0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let ys = (y + j as isize - r).clamp(0, h - 1);
                acc += kv * tmp[(ys * w + x) as usize];
            }
            out[(y * w + x) as usize] = acc.max(0.0) as f32;
        }
    }
    MotionMap::new(map.width, map.height, out)
}
