//! Motion-guided tube masking.
//!
//! A clip is cut into non-overlapping `T_t x H_t x W_t` tubes. Masks are
//! drawn over the spatial cells and replicated across every temporal slot,
//! so a masked location stays masked for the whole clip. Of the spatial
//! budget `B = round(overall_ratio * S)`, at least
//! `min(ceil(inside_ratio * S_in), B)` cells are taken from inside the
//! motion box; the rest come from outside, spilling back inside only once
//! the outside is exhausted.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::boxdetect::MotionBox;
use crate::clip::{ClipDims, ClipTensor, TubeDims};
use crate::error::{invalid, Result};
use crate::rng::rng_from_seed;

/// Slack for ratio arithmetic so that e.g. `0.7 * 10` counts as exactly 7.
const RATIO_SLACK: f64 = 1e-9;

/// Round half up.
pub fn budget(ratio: f64, cells: usize) -> usize {
    (ratio * cells as f64 + 0.5 + RATIO_SLACK).floor() as usize
}

/// Ceiling, never rounding a guarantee down.
pub fn inside_minimum(ratio: f64, inside_cells: usize) -> usize {
    ((ratio * inside_cells as f64 - RATIO_SLACK).ceil().max(0.0) as usize).min(inside_cells)
}

/// How a spatial cell is classified against the motion box.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InsideRule {
    /// The cell's centre pixel lies in the box.
    #[default]
    CellCenter,
    /// Any pixel of the cell lies in the box.
    AnyOverlap,
    /// At least half of the cell's pixels lie in the box.
    HalfOverlap,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TubeGrid {
    pub clip_dims: ClipDims,
    pub tube_dims: TubeDims,
    pub t_cells: usize,
    pub h_cells: usize,
    pub w_cells: usize,
    /// Per spatial cell, row-major `(h, w)`.
    pub inside: Vec<bool>,
    pub n_inner: usize,
    pub n_outer: usize,
}

impl TubeGrid {
    pub fn spatial_cells(&self) -> usize {
        self.h_cells * self.w_cells
    }

    pub fn tokens(&self) -> usize {
        self.t_cells * self.spatial_cells()
    }

    pub fn inside_cells(&self) -> usize {
        self.inside.iter().filter(|&&b| b).count()
    }

    /// Whether token `index` (canonical `(t, h, w)` order) lies in the box.
    pub fn token_inside(&self, index: usize) -> bool {
        self.inside[index % self.spatial_cells()]
    }

    fn from_inside(clip_dims: ClipDims, tube_dims: TubeDims, inside: Vec<bool>) -> Result<Self> {
        let (t_cells, h_cells, w_cells) = tube_dims.cells(clip_dims)?;
        if inside.len() != h_cells * w_cells {
            return Err(invalid("inside flags do not match the spatial grid"));
        }
        let s_in = inside.iter().filter(|&&b| b).count();
        let n = t_cells * h_cells * w_cells;
        Ok(Self {
            clip_dims,
            tube_dims,
            t_cells,
            h_cells,
            w_cells,
            inside,
            n_inner: t_cells * s_in,
            n_outer: n - t_cells * s_in,
        })
    }
}

/// A grid without a motion box; masks drawn on it are plain random tube
/// masks.
pub fn unboxed_grid(clip_dims: ClipDims, tube_dims: TubeDims) -> Result<TubeGrid> {
    let (_, h, w) = tube_dims.cells(clip_dims)?;
    TubeGrid::from_inside(clip_dims, tube_dims, vec![false; h * w])
}

pub fn tube_grid(clip_dims: ClipDims, tube_dims: TubeDims, motion_box: &MotionBox) -> Result<TubeGrid> {
    tube_grid_with_rule(clip_dims, tube_dims, motion_box, InsideRule::CellCenter)
}

pub fn tube_grid_with_rule(
    clip_dims: ClipDims,
    tube_dims: TubeDims,
    motion_box: &MotionBox,
    rule: InsideRule,
) -> Result<TubeGrid> {
    let (_, h_cells, w_cells) = tube_dims.cells(clip_dims)?;
    let mut inside = Vec::with_capacity(h_cells * w_cells);
    for ch in 0..h_cells {
        for cw in 0..w_cells {
            let cell = MotionBox {
                x0: cw * tube_dims.w,
                y0: ch * tube_dims.h,
                x1: (cw + 1) * tube_dims.w,
                y1: (ch + 1) * tube_dims.h,
            };
            let flag = match rule {
                InsideRule::CellCenter => motion_box.contains(cell.x0 + tube_dims.w / 2, cell.y0 + tube_dims.h / 2),
                InsideRule::AnyOverlap => motion_box.intersection_area(&cell) > 0,
                InsideRule::HalfOverlap => 2 * motion_box.intersection_area(&cell) >= cell.area(),
            };
            inside.push(flag);
        }
    }
    TubeGrid::from_inside(clip_dims, tube_dims, inside)
}

/// A tube mask; the spatial pattern applies to every temporal slot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "MaskPlanRecord", try_from = "MaskPlanRecord")]
pub struct MaskPlan {
    pub t_cells: usize,
    pub h_cells: usize,
    pub w_cells: usize,
    pub spatial: Vec<bool>,
    pub overall_ratio: f64,
    pub inside_ratio: f64,
    pub seed: u64,
    /// Spatial inside flags of the grid the plan was drawn for.
    pub inside: Vec<bool>,
}

impl MaskPlan {
    pub fn tokens(&self) -> usize {
        self.t_cells * self.h_cells * self.w_cells
    }

    pub fn is_masked(&self, t: usize, h: usize, w: usize) -> bool {
        debug_assert!(t < self.t_cells);
        self.spatial[h * self.w_cells + w]
    }

    /// Masked flag for every token in canonical `(t, h, w)` order.
    pub fn token_mask(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.tokens());
        for _ in 0..self.t_cells {
            out.extend_from_slice(&self.spatial);
        }
        out
    }

    pub fn spatial_masked(&self) -> usize {
        self.spatial.iter().filter(|&&b| b).count()
    }

    pub fn inside_masked(&self) -> usize {
        self.spatial.iter().zip(&self.inside).filter(|(&m, &i)| m && i).count()
    }

    pub fn masked_tokens(&self) -> usize {
        self.spatial_masked() * self.t_cells
    }

    pub fn matches(&self, grid: &TubeGrid) -> bool {
        self.t_cells == grid.t_cells && self.h_cells == grid.h_cells && self.w_cells == grid.w_cells
    }
}

/// JSON form of [`MaskPlan`] with the mask as a flat 0/1 array.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct MaskPlanRecord {
    t_cells: usize,
    h_cells: usize,
    w_cells: usize,
    seed: u64,
    overall_ratio: f64,
    inside_ratio: f64,
    spatial_cells: usize,
    inside_cells: usize,
    budget: usize,
    masked_spatial: usize,
    masked_inside: usize,
    masked_tokens: usize,
    spatial_mask: Vec<u8>,
    inside_mask: Vec<u8>,
}

impl From<MaskPlan> for MaskPlanRecord {
    fn from(p: MaskPlan) -> Self {
        let s = p.h_cells * p.w_cells;
        Self {
            t_cells: p.t_cells,
            h_cells: p.h_cells,
            w_cells: p.w_cells,
            seed: p.seed,
            overall_ratio: p.overall_ratio,
            inside_ratio: p.inside_ratio,
            spatial_cells: s,
            inside_cells: p.inside.iter().filter(|&&b| b).count(),
            budget: budget(p.overall_ratio, s),
            masked_spatial: p.spatial_masked(),
            masked_inside: p.inside_masked(),
            masked_tokens: p.masked_tokens(),
            spatial_mask: p.spatial.iter().map(|&b| u8::from(b)).collect(),
            inside_mask: p.inside.iter().map(|&b| u8::from(b)).collect(),
        }
    }
}

impl TryFrom<MaskPlanRecord> for MaskPlan {
    type Error = String;

    fn try_from(r: MaskPlanRecord) -> Result<Self, String> {
        let s = r.h_cells * r.w_cells;
        if r.spatial_mask.len() != s || r.inside_mask.len() != s {
            return Err(format!("mask arrays must have {s} entries"));
        }
        let bit = |v: &u8| match v {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(format!("mask entries must be 0 or 1, got {other}")),
        };
        Ok(Self {
            t_cells: r.t_cells,
            h_cells: r.h_cells,
            w_cells: r.w_cells,
            spatial: r.spatial_mask.iter().map(bit).collect::<Result<_, _>>()?,
            overall_ratio: r.overall_ratio,
            inside_ratio: r.inside_ratio,
            seed: r.seed,
            inside: r.inside_mask.iter().map(bit).collect::<Result<_, _>>()?,
        })
    }
}

pub fn sample_mask(grid: &TubeGrid, overall_ratio: f64, inside_ratio: f64, seed: u64) -> Result<MaskPlan> {
    if !(overall_ratio > 0.0 && overall_ratio <= 1.0) {
        return Err(invalid(format!("overall ratio must be in (0, 1], got {overall_ratio}")));
    }
    if !(0.0..=1.0).contains(&inside_ratio) {
        return Err(invalid(format!("inside ratio must be in [0, 1], got {inside_ratio}")));
    }
    let s = grid.spatial_cells();
    let b = budget(overall_ratio, s);
    if b == 0 {
        return Err(invalid("masking budget is zero: nothing to reconstruct"));
    }

    let inside_idx: Vec<usize> = (0..s).filter(|&i| grid.inside[i]).collect();
    let outside_idx: Vec<usize> = (0..s).filter(|&i| !grid.inside[i]).collect();
    let k_in = inside_minimum(inside_ratio, inside_idx.len()).min(b);

    let mut rng = rng_from_seed(seed);
    let mut spatial = vec![false; s];
    let mut inside_taken = vec![false; inside_idx.len()];
    for k in index::sample(&mut rng, inside_idx.len(), k_in) {
        inside_taken[k] = true;
        spatial[inside_idx[k]] = true;
    }
    let rest = b - k_in;
    if rest <= outside_idx.len() {
        for k in index::sample(&mut rng, outside_idx.len(), rest) {
            spatial[outside_idx[k]] = true;
        }
    } else {
        for &i in &outside_idx {
            spatial[i] = true;
        }
        let remaining: Vec<usize> = (0..inside_idx.len()).filter(|&k| !inside_taken[k]).collect();
        for k in index::sample(&mut rng, remaining.len(), rest - outside_idx.len()) {
            spatial[inside_idx[remaining[k]]] = true;
        }
    }

    Ok(MaskPlan {
        t_cells: grid.t_cells,
        h_cells: grid.h_cells,
        w_cells: grid.w_cells,
        spatial,
        overall_ratio,
        inside_ratio,
        seed,
        inside: grid.inside.clone(),
    })
}

/// Visible/masked token partition of a clip.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenPartition {
    /// Strictly increasing canonical indices.
    pub visible: Vec<usize>,
    pub masked: Vec<usize>,
    /// Flattened tube values of each visible token.
    pub visible_tokens: Vec<Vec<f32>>,
}

pub fn apply_mask(clip: &ClipTensor, tube_dims: TubeDims, plan: &MaskPlan) -> Result<TokenPartition> {
    let (t, h, w) = tube_dims.cells(clip.dims())?;
    if (t, h, w) != (plan.t_cells, plan.h_cells, plan.w_cells) {
        return Err(invalid(format!(
            "plan grid {}x{}x{} does not match clip grid {t}x{h}x{w}",
            plan.t_cells, plan.h_cells, plan.w_cells
        )));
    }
    let mut tubes = clip.tubes(tube_dims)?;
    let mask = plan.token_mask();
    let (masked, visible): (Vec<usize>, Vec<usize>) = (0..mask.len()).partition(|&i| mask[i]);
    let visible_tokens = visible.iter().map(|&i| std::mem::take(&mut tubes[i])).collect();
    Ok(TokenPartition { visible, masked, visible_tokens })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn full_size_grid() -> TubeGrid {
        // columns 0..8, rows 0..5 of the 14x14 grid: 40 cells
        let b = MotionBox::new(0, 0, 128, 80).unwrap();
        tube_grid(ClipDims::new(16, 224, 224), TubeDims::new(8, 16, 16), &b).unwrap()
    }

    #[test]
    fn grid_shapes() {
        let g = full_size_grid();
        assert_eq!((g.t_cells, g.h_cells, g.w_cells), (2, 14, 14));
        assert_eq!(g.tokens(), 392);
        assert_eq!(g.inside_cells(), 40);
        assert_eq!(g.n_inner, 80);
        assert_eq!(g.n_inner + g.n_outer, 392);

        let b = MotionBox::full_frame(32, 32);
        let g = tube_grid(ClipDims::new(8, 32, 32), TubeDims::new(8, 16, 16), &b).unwrap();
        assert_eq!(g.tokens(), 4);
        let g = tube_grid(ClipDims::new(8, 32, 32), TubeDims::new(8, 32, 32), &b).unwrap();
        assert_eq!(g.tokens(), 1);
        assert!(tube_grid(ClipDims::new(8, 30, 32), TubeDims::new(8, 16, 16), &b).is_err());
    }

    #[test]
    fn inside_rules() {
        let clip = ClipDims::new(1, 32, 32);
        let tube = TubeDims::new(1, 16, 16);
        // covers 12x12 of cell 0 and 4x12 or 4x4 of the others
        let b = MotionBox::new(4, 4, 20, 20).unwrap();
        assert_eq!(tube_grid(clip, tube, &b).unwrap().inside, vec![true, false, false, false]);
        let any = tube_grid_with_rule(clip, tube, &b, InsideRule::AnyOverlap).unwrap();
        assert_eq!(any.inside, vec![true; 4]);
        let half = tube_grid_with_rule(clip, tube, &b, InsideRule::HalfOverlap).unwrap();
        assert_eq!(half.inside, vec![true, false, false, false]);
        let small = MotionBox::new(10, 10, 20, 20).unwrap();
        assert_eq!(tube_grid(clip, tube, &small).unwrap().inside, vec![false; 4]);
    }

    #[test]
    fn full_size_counts() {
        let g = full_size_grid();
        let plan = sample_mask(&g, 0.9, 0.75, 42).unwrap();
        assert_eq!(plan.spatial_masked(), 176);
        assert!(plan.inside_masked() >= 30);
        assert_eq!(plan.masked_tokens(), 352);
        let clip = ClipTensor::zeros(ClipDims::new(16, 224, 224), 1);
        let part = apply_mask(&clip, TubeDims::new(8, 16, 16), &plan).unwrap();
        assert_eq!(part.visible.len(), 40);
        assert_eq!(part.masked.len(), 352);
        assert!(part.visible.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(part.visible_tokens[0].len(), 8 * 16 * 16);
    }

    #[test]
    fn full_frame_box_is_plain_tube_masking() {
        let b = MotionBox::full_frame(224, 224);
        let g = tube_grid(ClipDims::new(16, 224, 224), TubeDims::new(8, 16, 16), &b).unwrap();
        assert_eq!(g.inside_cells(), 196);
        let plan = sample_mask(&g, 0.9, 0.75, 3).unwrap();
        assert_eq!(plan.spatial_masked(), 176);
        assert_eq!(plan.inside_masked(), 176);
    }

    #[test]
    fn determinism_and_seed_sensitivity() {
        let g = full_size_grid();
        assert_eq!(sample_mask(&g, 0.9, 0.75, 9).unwrap(), sample_mask(&g, 0.9, 0.75, 9).unwrap());
        assert_ne!(sample_mask(&g, 0.9, 0.75, 9).unwrap().spatial, sample_mask(&g, 0.9, 0.75, 10).unwrap().spatial);
    }

    #[test]
    fn zero_budget_is_rejected() {
        let b = MotionBox::full_frame(32, 32);
        let g = tube_grid(ClipDims::new(8, 32, 32), TubeDims::new(8, 16, 16), &b).unwrap();
        assert!(sample_mask(&g, 0.1, 0.75, 0).is_err());
        assert!(sample_mask(&g, 0.0, 0.75, 0).is_err());
        assert!(sample_mask(&g, 0.9, 1.5, 0).is_err());
    }

    #[test]
    fn three_of_four_leaves_one_visible() {
        let b = MotionBox::full_frame(32, 32);
        let g = tube_grid(ClipDims::new(8, 32, 32), TubeDims::new(8, 16, 16), &b).unwrap();
        let plan = sample_mask(&g, 0.75, 0.0, 5).unwrap();
        let clip = ClipTensor::zeros(ClipDims::new(8, 32, 32), 1);
        let part = apply_mask(&clip, TubeDims::new(8, 16, 16), &plan).unwrap();
        assert_eq!(part.visible.len(), 1);
        let other = ClipTensor::zeros(ClipDims::new(8, 64, 32), 1);
        assert!(apply_mask(&other, TubeDims::new(8, 16, 16), &plan).is_err());
    }

    #[test]
    fn budget_conflict_saturates_inside() {
        // 16 cells, 12 inside, budget 8 < ceil(0.75 * 12) = 9
        let inside: Vec<bool> = (0..16).map(|i| i < 12).collect();
        let g = TubeGrid::from_inside(ClipDims::new(2, 4, 4), TubeDims::new(1, 1, 1), inside).unwrap();
        let plan = sample_mask(&g, 0.5, 0.75, 1).unwrap();
        assert_eq!(plan.spatial_masked(), 8);
        assert_eq!(plan.inside_masked(), 8);
    }

    #[test]
    fn outside_exhaustion_spills_inside() {
        // 16 cells, 12 inside, 4 outside; budget 14, inside minimum 3
        let inside: Vec<bool> = (0..16).map(|i| i >= 4).collect();
        let g = TubeGrid::from_inside(ClipDims::new(1, 4, 4), TubeDims::new(1, 1, 1), inside).unwrap();
        let plan = sample_mask(&g, 0.9, 0.25, 1).unwrap();
        assert_eq!(plan.spatial_masked(), 14);
        assert_eq!(plan.inside_masked(), 10);
    }

    #[test]
    fn rounding_rules() {
        assert_eq!(budget(0.9, 196), 176);
        assert_eq!(budget(0.5, 5), 3);
        assert_eq!(budget(0.9, 16), 14);
        assert_eq!(inside_minimum(0.75, 40), 30);
        assert_eq!(inside_minimum(0.7, 10), 7);
        assert_eq!(inside_minimum(0.75, 5), 4);
    }

    #[test]
    fn json_roundtrip() {
        let plan = sample_mask(&full_size_grid(), 0.9, 0.75, 11).unwrap();
        let json = serde_json::to_value(&plan).unwrap();
        assert_eq!(json["masked_spatial"], 176);
        assert_eq!(json["spatial_mask"].as_array().unwrap().len(), 196);
        let back: MaskPlan = serde_json::from_value(json).unwrap();
        assert_eq!(back, plan);
    }

    fn arb_grid() -> impl Strategy<Value = TubeGrid> {
        (1usize..4, 1usize..12, 1usize..12).prop_flat_map(|(t, h, w)| {
            prop::collection::vec(any::<bool>(), h * w).prop_map(move |inside| {
                TubeGrid::from_inside(ClipDims::new(t, h, w), TubeDims::new(1, 1, 1), inside).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn counts_and_tube_consistency(
            grid in arb_grid(),
            overall in 0.05f64..=1.0,
            inside in 0.0f64..=1.0,
            seed in any::<u64>(),
        ) {
            let s = grid.spatial_cells();
            let b = budget(overall, s);
            prop_assume!(b > 0);
            let plan = sample_mask(&grid, overall, inside, seed).unwrap();
            prop_assert_eq!(plan.spatial_masked(), b);
            prop_assert!(plan.inside_masked() >= inside_minimum(inside, grid.inside_cells()).min(b));
            let mask = plan.token_mask();
            for t in 0..grid.t_cells {
                prop_assert_eq!(&mask[t * s..(t + 1) * s], &mask[..s]);
            }
        }
    }
}
