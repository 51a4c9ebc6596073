//! Suzuki–Abe topological border following.
//!
//! Foreground is 8-connected, background 4-connected. Both outer and hole
//! borders are followed so the label image stays consistent, but only outer
//! borders are reported.

use serde::Serialize;

use super::{BitMask, MotionBox};

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Contour {
    /// Border pixels `(x, y)` in tracing order.
    pub points: Vec<(usize, usize)>,
    /// Pixel count of the 8-connected component the border encloses.
    pub area: usize,
}

impl Contour {
    pub fn bounding_box(&self) -> MotionBox {
        let x0 = self.points.iter().map(|p| p.0).min().unwrap_or(0);
        let y0 = self.points.iter().map(|p| p.1).min().unwrap_or(0);
        let x1 = self.points.iter().map(|p| p.0).max().unwrap_or(0) + 1;
        let y1 = self.points.iter().map(|p| p.1).max().unwrap_or(0) + 1;
        MotionBox { x0, y0, x1, y1 }
    }
}

/// Neighbour offsets `(drow, dcol)`, clockwise on screen starting east.
const DIRS: [(isize, isize); 8] = [(0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1), (-1, 0), (-1, 1)];

fn dir_of(from: (usize, usize), to: (usize, usize)) -> usize {
    let d = (to.0 as isize - from.0 as isize, to.1 as isize - from.1 as isize);
    DIRS.iter().position(|&x| x == d).expect("pixels are not neighbours")
}

fn step(p: (usize, usize), d: usize) -> (usize, usize) {
    ((p.0 as isize + DIRS[d].0) as usize, (p.1 as isize + DIRS[d].1) as usize)
}

/// 8-connected component labels (1-based, 0 = background) and sizes,
/// indexed like the padded image.
fn label_components(f: &[i32], stride: usize, rows: usize) -> (Vec<usize>, Vec<usize>) {
    let mut labels = vec![0usize; f.len()];
    let mut sizes = vec![0usize];
    let mut stack = Vec::new();
    for start in 0..f.len() {
        if f[start] == 0 || labels[start] != 0 {
            continue;
        }
        let id = sizes.len();
        sizes.push(0);
        labels[start] = id;
        stack.push(start);
        while let Some(p) = stack.pop() {
            sizes[id] += 1;
            let (r, c) = (p / stride, p % stride);
            for &(dr, dc) in &DIRS {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if nr < 0 || nc < 0 || nr as usize >= rows || nc as usize >= stride {
                    continue;
                }
                let q = nr as usize * stride + nc as usize;
                if f[q] != 0 && labels[q] == 0 {
                    labels[q] = id;
                    stack.push(q);
                }
            }
        }
    }
    (labels, sizes)
}

/// Outer borders of the 8-connected foreground components of `mask`, in
/// raster order of their starting pixel.
pub fn find_contours(mask: &BitMask) -> Vec<Contour> {
    let (w, h) = (mask.width(), mask.height());
    let stride = w + 2;
    let rows = h + 2;
    let mut f = vec![0i32; stride * rows];
    for y in 0..h {
        for x in 0..w {
            if mask.get(x, y) {
                f[(y + 1) * stride + x + 1] = 1;
            }
        }
    }
    let (labels, sizes) = label_components(&f, stride, rows);
    let idx = |p: (usize, usize)| p.0 * stride + p.1;

    let mut contours = Vec::new();
    let mut nbd: i32 = 1;
    for i in 1..=h {
        for j in 1..=w {
            let fij = f[i * stride + j];
            let (outer, from) = if fij == 1 && f[i * stride + j - 1] == 0 {
                (true, (i, j - 1))
            } else if fij >= 1 && f[i * stride + j + 1] == 0 {
                (false, (i, j + 1))
            } else {
                continue;
            };
            nbd += 1;
            let start = (i, j);
            let points = follow_border(&mut f, start, from, nbd, &idx);
            if outer {
                let area = sizes[labels[idx(start)]];
                contours.push(Contour { points: points.into_iter().map(|(r, c)| (c - 1, r - 1)).collect(), area });
            }
        }
    }
    contours
}

fn follow_border(
    f: &mut [i32],
    start: (usize, usize),
    from: (usize, usize),
    nbd: i32,
    idx: &impl Fn((usize, usize)) -> usize,
) -> Vec<(usize, usize)> {
    // 3.1: clockwise from `from` for the first non-zero neighbour
    let d0 = dir_of(start, from);
    let first = (0..8).map(|k| (d0 + k) % 8).map(|d| step(start, d)).find(|&p| f[idx(p)] != 0);
    let Some(p1) = first else {
        f[idx(start)] = -nbd;
        return vec![start];
    };

    let mut points = Vec::new();
    let mut p2 = p1;
    let mut p3 = start;
    loop {
        // 3.3: counter-clockwise around p3, starting after p2
        let d2 = dir_of(p3, p2);
        let mut east_zero = false;
        let mut p4 = p2;
        for k in 1..=8 {
            let d = (d2 + 8 - k) % 8;
            let q = step(p3, d);
            if f[idx(q)] != 0 {
                p4 = q;
                break;
            }
            if d == 0 {
                east_zero = true;
            }
        }
        // 3.4
        let i3 = idx(p3);
        if east_zero {
            f[i3] = -nbd;
        } else if f[i3] == 1 {
            f[i3] = nbd;
        }
        points.push(p3);
        // 3.5
        if p4 == start && p3 == p1 {
            break;
        }
        p2 = p3;
        p3 = p4;
    }
    points
}
