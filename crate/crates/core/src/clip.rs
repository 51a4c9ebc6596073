//! Video clip tensors and their tube tokenization.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::flow::Frame;

/// Clip extent in frames and pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClipDims {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

/// Tube extent `(T_t, H_t, W_t)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TubeDims {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl ClipDims {
    pub fn new(t: usize, h: usize, w: usize) -> Self {
        Self { t, h, w }
    }
}

impl TubeDims {
    pub fn new(t: usize, h: usize, w: usize) -> Self {
        Self { t, h, w }
    }

    pub fn volume(&self) -> usize {
        self.t * self.h * self.w
    }

    /// Number of cells along each axis, or an error if the clip does not
    /// divide evenly.
    pub fn cells(&self, clip: ClipDims) -> Result<(usize, usize, usize)> {
        if self.t == 0 || self.h == 0 || self.w == 0 {
            return Err(invalid("tube dimensions must be positive"));
        }
        if clip.t % self.t != 0 || clip.h % self.h != 0 || clip.w % self.w != 0 {
            return Err(invalid(format!(
                "clip {}x{}x{} is not divisible by tube {}x{}x{}",
                clip.t, clip.h, clip.w, self.t, self.h, self.w
            )));
        }
        Ok((clip.t / self.t, clip.h / self.h, clip.w / self.w))
    }
}

/// A `(T, H, W, C)` clip, row-major with channels innermost.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipTensor {
    dims: ClipDims,
    channels: usize,
    values: Vec<f32>,
}

impl ClipTensor {
    pub fn new(dims: ClipDims, channels: usize, values: Vec<f32>) -> Result<Self> {
        if dims.t == 0 || dims.h == 0 || dims.w == 0 || channels == 0 {
            return Err(invalid("clip dimensions must be positive"));
        }
        if values.len() != dims.t * dims.h * dims.w * channels {
            return Err(invalid(format!(
                "clip expects {} values, got {}",
                dims.t * dims.h * dims.w * channels,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("clip contains non-finite values"));
        }
        Ok(Self { dims, channels, values })
    }

    pub fn zeros(dims: ClipDims, channels: usize) -> Self {
        Self { dims, channels, values: vec![0.0; dims.t * dims.h * dims.w * channels] }
    }

    /// Single-channel clip from grayscale frames.
    pub fn from_frames(frames: &[Frame]) -> Result<Self> {
        let first = frames.first().ok_or_else(|| invalid("no frames"))?;
        let (w, h) = (first.width(), first.height());
        let mut values = Vec::with_capacity(frames.len() * w * h);
        for f in frames {
            if f.width() != w || f.height() != h {
                return Err(invalid("frames have mixed dimensions"));
            }
            values.extend_from_slice(f.pixels());
        }
        Self::new(ClipDims::new(frames.len(), h, w), 1, values)
    }

    pub fn dims(&self) -> ClipDims {
        self.dims
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn index(&self, t: usize, y: usize, x: usize, c: usize) -> usize {
        ((t * self.dims.h + y) * self.dims.w + x) * self.channels + c
    }

    /// Flattened offsets of every value belonging to one tube, in
    /// `(t, y, x, c)` order.
    pub fn tube_offsets(&self, tube: TubeDims, cell: (usize, usize, usize)) -> Vec<usize> {
        let (ct, ch, cw) = cell;
        let mut out = Vec::with_capacity(tube.volume() * self.channels);
        for dt in 0..tube.t {
            for dy in 0..tube.h {
                for dx in 0..tube.w {
                    let base = self.index(ct * tube.t + dt, ch * tube.h + dy, cw * tube.w + dx, 0);
                    out.extend(base..base + self.channels);
                }
            }
        }
        out
    }

    /// Splits the clip into non-overlapping tubes in canonical `(t, h, w)`
    /// row-major token order. Each tube is flattened in `(t, y, x, c)` order.
    pub fn tubes(&self, tube: TubeDims) -> Result<Vec<Vec<f32>>> {
        let (nt, nh, nw) = tube.cells(self.dims)?;
        let mut out = Vec::with_capacity(nt * nh * nw);
        for ct in 0..nt {
            for ch in 0..nh {
                for cw in 0..nw {
                    let offs = self.tube_offsets(tube, (ct, ch, cw));
                    out.push(offs.into_iter().map(|o| self.values[o]).collect());
                }
            }
        }
        Ok(out)
    }
}
