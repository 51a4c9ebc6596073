use mofo_core::boxdetect::MotionBox;
use mofo_core::clip::{ClipDims, TubeDims};
use mofo_core::masker::{budget, inside_minimum, sample_mask, tube_grid, TubeGrid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Per-cell masking frequency over every spatial mask that has exactly the
/// budgeted count and the inside count the sampler commits to, each mask
/// weighted equally.
fn enumeration_oracle(inside: &[bool], overall: f64, inside_ratio: f64) -> Vec<f64> {
    let s = inside.len();
    let s_in = inside.iter().filter(|&&b| b).count();
    let b = budget(overall, s);
    let k_in = inside_minimum(inside_ratio, s_in).min(b);
    let want_in = if b - k_in <= s - s_in { k_in } else { b - (s - s_in) };
    let in_bits: u32 = (0..s).filter(|&i| inside[i]).map(|i| 1u32 << i).sum();
    let mut hits = vec![0u64; s];
    let mut total = 0u64;
    for m in 0u32..1 << s {
        if m.count_ones() as usize != b || (m & in_bits).count_ones() as usize != want_in {
            continue;
        }
        total += 1;
        for (i, h) in hits.iter_mut().enumerate() {
            *h += u64::from(m >> i & 1);
        }
    }
    hits.iter().map(|&h| h as f64 / total as f64).collect()
}

fn small_grid() -> TubeGrid {
    // 4x4 spatial cells of 8 px; the box covers the top-left 2x2 block.
    tube_grid(ClipDims::new(2, 32, 32), TubeDims::new(2, 8, 8), &MotionBox::new(0, 0, 16, 16).unwrap()).unwrap()
}

#[test]
fn per_cell_frequencies_match_enumeration() {
    let grid = small_grid();
    assert_eq!((grid.spatial_cells(), grid.inside_cells()), (16, 4));
    for (overall, inside) in [(0.9, 0.75), (0.5, 0.75), (0.3, 0.25)] {
        let oracle = enumeration_oracle(&grid.inside, overall, inside);
        let mut counts = vec![0usize; 16];
        let n = 10_000;
        for seed in 0..n {
            let plan = sample_mask(&grid, overall, inside, seed).unwrap();
            for (c, &m) in counts.iter_mut().zip(&plan.spatial) {
                *c += m as usize;
            }
        }
        for (i, (&c, &p)) in counts.iter().zip(&oracle).enumerate() {
            let f = c as f64 / n as f64;
            assert!((f - p).abs() <= 0.05 * p, "ratios ({overall}, {inside}) cell {i}: {f} vs {p}");
        }
    }
}

#[test]
fn oracle_marginals_sum_to_budget() {
    let grid = small_grid();
    let f = enumeration_oracle(&grid.inside, 0.9, 0.75);
    assert!((f.iter().sum::<f64>() - 14.0).abs() < 1e-12);
    assert!((f[0] - 0.75).abs() < 1e-12);
    assert!((f[15] - 11.0 / 12.0).abs() < 1e-12);
}

#[test]
fn counts_hold_over_random_boxes() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut violations = 0;
    let mut checked = 0;
    for _ in 0..1000 {
        let th = rng.random_range(1..=4usize);
        let (ht, wt) = (rng.random_range(4..=16usize), rng.random_range(4..=16usize));
        let (t, h, w) = (th * rng.random_range(1..=3), ht * rng.random_range(1..=8), wt * rng.random_range(1..=8));
        let x0 = rng.random_range(0..w);
        let y0 = rng.random_range(0..h);
        let b = MotionBox::new(x0, y0, rng.random_range(x0 + 1..=w), rng.random_range(y0 + 1..=h)).unwrap();
        let dims = ClipDims::new(t, h, w);
        let tubes = TubeDims::new(th, h / ht, w / wt);
        let Ok(grid) = tube_grid(dims, tubes, &b) else { continue };
        checked += 1;
        let plan = sample_mask(&grid, 0.9, 0.75, rng.random()).unwrap();
        let s = grid.spatial_cells();
        let bdg = budget(0.9, s);
        let mask = plan.token_mask();
        let consistent = (0..grid.t_cells).all(|k| mask[k * s..(k + 1) * s] == mask[..s]);
        if plan.spatial_masked() != bdg
            || plan.inside_masked() < inside_minimum(0.75, grid.inside_cells()).min(bdg)
            || plan.masked_tokens() != bdg * grid.t_cells
            || !consistent
        {
            violations += 1;
        }
    }
    assert_eq!((checked, violations), (1000, 0));
}

#[test]
fn forty_cell_box_on_the_full_size_grid() {
    let grid =
        tube_grid(ClipDims::new(16, 224, 224), TubeDims::new(8, 16, 16), &MotionBox::new(0, 0, 128, 80).unwrap())
            .unwrap();
    assert_eq!((grid.tokens(), grid.spatial_cells(), grid.inside_cells()), (392, 196, 40));
    for seed in 0..50 {
        let plan = sample_mask(&grid, 0.9, 0.75, seed).unwrap();
        assert_eq!(plan.spatial_masked(), 176);
        assert!(plan.inside_masked() >= 30);
    }
}
