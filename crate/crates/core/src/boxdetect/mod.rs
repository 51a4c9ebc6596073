//! Motion boxes from motion maps.
//!
//! Per frame: Gaussian-smoothed motion map → Otsu binarization → outer
//! contours → the tightest box around the two largest components. A clip's
//! box is the union of its frame boxes.

mod contour;
mod otsu;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::flow::{clip_flows, FlowConfig, Frame};
use crate::motionmap::{gaussian_smooth, motion_map, MotionMap, SmoothConfig};

pub use contour::{find_contours, Contour};
pub use otsu::{otsu_split, OtsuSplit, OTSU_BINS};

/// Components smaller than this fraction of the frame are ignored when
/// ranking contours.
pub const MIN_AREA_FRACTION: f64 = 0.001;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BitMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(invalid("mask length does not match dimensions"));
        }
        Ok(Self { width, height, bits })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let bits = (0..height).flat_map(|y| (0..width).map(move |x| (x, y))).map(|(x, y)| f(x, y)).collect();
        Self { width, height, bits }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Axis-aligned box; `(x0, y0)` inclusive, `(x1, y1)` exclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MotionBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl MotionBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Self> {
        if x0 >= x1 || y0 >= y1 {
            return Err(invalid(format!("empty box ({x0},{y0})-({x1},{y1})")));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn full_frame(width: usize, height: usize) -> Self {
        Self { x0: 0, y0: 0, x1: width, y1: height }
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0..self.x1).contains(&x) && (self.y0..self.y1).contains(&y)
    }

    pub fn union(&self, other: &Self) -> Self {
        Self {
            x0: self.x0.min(other.x0),
            y0: self.y0.min(other.y0),
            x1: self.x1.max(other.x1),
            y1: self.y1.max(other.y1),
        }
    }

    pub fn intersection_area(&self, other: &Self) -> usize {
        let w = self.x1.min(other.x1).saturating_sub(self.x0.max(other.x0));
        let h = self.y1.min(other.y1).saturating_sub(self.y0.max(other.y0));
        w * h
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.x0 < self.x1 && self.y0 < self.y1 && self.x1 <= width && self.y1 <= height
    }
}

/// Intersection over union by pixel area.
pub fn iou(a: &MotionBox, b: &MotionBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Otsu binarization; a constant map yields an all-false mask.
pub fn binarize(map: &MotionMap) -> BitMask {
    let bits = match otsu_split(map.values()) {
        Some(split) => map.values().iter().map(|&v| split.is_foreground(v)).collect(),
        None => vec![false; map.values().len()],
    };
    BitMask { width: map.width(), height: map.height(), bits }
}

/// Box around the two largest contours (by area) after discarding specks,
/// or `None` if nothing survives.
pub fn significant_box(contours: &[Contour], width: usize, height: usize) -> Option<MotionBox> {
    let min_area = MIN_AREA_FRACTION * (width * height) as f64;
    let mut ranked: Vec<&Contour> = contours.iter().filter(|c| c.area as f64 >= min_area).collect();
    ranked.sort_by_key(|c| std::cmp::Reverse(c.area));
    ranked.iter().take(2).map(|c| c.bounding_box()).reduce(|a, b| a.union(&b))
}

/// [`significant_box`] with the full frame as fallback.
pub fn select_motion_box(contours: &[Contour], width: usize, height: usize) -> MotionBox {
    significant_box(contours, width, height).unwrap_or_else(|| MotionBox::full_frame(width, height))
}

/// Motion box of one smoothed map, `None` when the map has no motion.
pub fn frame_motion_box(map: &MotionMap, smooth: &SmoothConfig) -> Result<Option<MotionBox>> {
    let smoothed = gaussian_smooth(map, smooth)?;
    let contours = find_contours(&binarize(&smoothed));
    Ok(significant_box(&contours, map.width(), map.height()))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClipBoxes {
    /// One entry per consecutive frame pair.
    pub per_frame: Vec<Option<MotionBox>>,
    pub clip: MotionBox,
    /// True when no frame had motion and `clip` is the full frame.
    pub fallback: bool,
}

/// Full detection pipeline with per-frame detail. The clip box is the union
/// of the frame boxes; frames without motion do not contribute, and a clip
/// without any motion falls back to the full frame.
pub fn clip_motion_boxes(frames: &[Frame], flow: &FlowConfig, smooth: &SmoothConfig) -> Result<ClipBoxes> {
    smooth.validate()?;
    let flows = clip_flows(frames, flow)?;
    let (w, h) = (frames[0].width(), frames[0].height());
    let per_frame = flows.par_iter().map(|f| frame_motion_box(&motion_map(f)?, smooth)).collect::<Result<Vec<_>>>()?;
    let clip = per_frame.iter().flatten().copied().reduce(|a, b| a.union(&b));
    Ok(ClipBoxes { fallback: clip.is_none(), clip: clip.unwrap_or_else(|| MotionBox::full_frame(w, h)), per_frame })
}

pub fn clip_motion_box(frames: &[Frame], flow: &FlowConfig, smooth: &SmoothConfig) -> Result<MotionBox> {
    clip_motion_boxes(frames, flow, smooth).map(|b| b.clip)
}
