//! Coarse-to-fine TV-L1 optical flow, duality-based.
//!
//! Each pyramid level alternates between a pointwise thresholding step on
//! the linearized data term and Chambolle's projection for the total
//! variation term, re-linearizing around the current flow after every warp.

use serde::Serialize;

use super::{FlowConfig, Frame};

/// Presmoothing applied to the input frames before building the pyramid.
const PRESMOOTH_SIGMA: f32 = 0.8;
const GRAD_IS_ZERO: f32 = 1e-10;

/// TV-L1 energy at one pyramid level: the value for the initial flow
/// followed by the value after each warp.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LevelTrace {
    pub width: usize,
    pub height: usize,
    pub energies: Vec<f64>,
}

#[derive(Clone, Debug)]
struct Img {
    w: usize,
    h: usize,
    d: Vec<f32>,
}

impl Img {
    fn new(w: usize, h: usize) -> Self {
        Self { w, h, d: vec![0.0; w * h] }
    }

    #[inline]
    fn at(&self, x: isize, y: isize) -> f32 {
        let xc = x.clamp(0, self.w as isize - 1) as usize;
        let yc = y.clamp(0, self.h as isize - 1) as usize;
        self.d[yc * self.w + xc]
    }

    /// Bilinear sample with edge clamping.
    fn sample(&self, x: f32, y: f32) -> f32 {
        let x = x.clamp(0.0, (self.w - 1) as f32);
        let y = y.clamp(0.0, (self.h - 1) as f32);
        let x0 = x.floor() as isize;
        let y0 = y.floor() as isize;
        let fx = x - x0 as f32;
        let fy = y - y0 as f32;
        let a = self.at(x0, y0);
        let b = self.at(x0 + 1, y0);
        let c = self.at(x0, y0 + 1);
        let d = self.at(x0 + 1, y0 + 1);
        (1.0 - fy) * ((1.0 - fx) * a + fx * b) + fy * ((1.0 - fx) * c + fx * d)
    }
}

fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f32> = (-radius..=radius).map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

fn blur(img: &Img, sigma: f32) -> Img {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = Img::new(img.w, img.h);
    for y in 0..img.h as isize {
        for x in 0..img.w as isize {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                acc += kv * img.at(x + j as isize - r, y);
            }
            tmp.d[y as usize * img.w + x as usize] = acc;
        }
    }
    let mut out = Img::new(img.w, img.h);
    for y in 0..img.h as isize {
        for x in 0..img.w as isize {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                acc += kv * tmp.at(x, y + j as isize - r);
            }
            out.d[y as usize * img.w + x as usize] = acc;
        }
    }
    out
}

/// Antialiased bilinear downsampling to `(w, h)`.
fn zoom_out(img: &Img, w: usize, h: usize, scale: f64) -> Img {
    let sigma = (0.6 * (1.0 / (scale * scale) - 1.0).sqrt()) as f32;
    let smooth = blur(img, sigma);
    let sx = img.w as f32 / w as f32;
    let sy = img.h as f32 / h as f32;
    let mut out = Img::new(w, h);
    for y in 0..h {
        for x in 0..w {
            out.d[y * w + x] = smooth.sample((x as f32 + 0.5) * sx - 0.5, (y as f32 + 0.5) * sy - 0.5);
        }
    }
    out
}

/// Bilinear upsampling of a flow component, rescaling its magnitude.
fn zoom_in(flow: &Img, w: usize, h: usize, factor: f32) -> Img {
    let sx = flow.w as f32 / w as f32;
    let sy = flow.h as f32 / h as f32;
    let mut out = Img::new(w, h);
    for y in 0..h {
        for x in 0..w {
            out.d[y * w + x] = factor * flow.sample((x as f32 + 0.5) * sx - 0.5, (y as f32 + 0.5) * sy - 0.5);
        }
    }
    out
}

/// Central differences with replicated borders.
fn centered_gradient(img: &Img) -> (Img, Img) {
    let mut gx = Img::new(img.w, img.h);
    let mut gy = Img::new(img.w, img.h);
    for y in 0..img.h as isize {
        for x in 0..img.w as isize {
            let i = y as usize * img.w + x as usize;
            gx.d[i] = 0.5 * (img.at(x + 1, y) - img.at(x - 1, y));
            gy.d[i] = 0.5 * (img.at(x, y + 1) - img.at(x, y - 1));
        }
    }
    (gx, gy)
}

/// Forward differences, zero on the last column/row.
fn forward_gradient(u: &[f32], w: usize, h: usize, gx: &mut [f32], gy: &mut [f32]) {
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            gx[i] = if x + 1 < w { u[i + 1] - u[i] } else { 0.0 };
            gy[i] = if y + 1 < h { u[i + w] - u[i] } else { 0.0 };
        }
    }
}

/// Negative adjoint of [`forward_gradient`].
fn divergence(p1: &[f32], p2: &[f32], w: usize, h: usize, div: &mut [f32]) {
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let dx = match x {
                0 => p1[i],
                _ if x + 1 == w => -p1[i - 1],
                _ => p1[i] - p1[i - 1],
            };
            let dy = match y {
                0 => p2[i],
                _ if y + 1 == h => -p2[i - w],
                _ => p2[i] - p2[i - w],
            };
            div[i] = if w == 1 { 0.0 } else { dx } + if h == 1 { 0.0 } else { dy };
        }
    }
}

fn median3x3(src: &Img) -> Img {
    let mut out = Img::new(src.w, src.h);
    let mut win = [0.0f32; 9];
    for y in 0..src.h as isize {
        for x in 0..src.w as isize {
            let mut k = 0;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    win[k] = src.at(x + dx, y + dy);
                    k += 1;
                }
            }
            win.sort_unstable_by(f32::total_cmp);
            out.d[y as usize * src.w + x as usize] = win[4];
        }
    }
    out
}

/// TV-L1 energy `sum lambda |I1(x + u) - I0(x)| + |grad u1| + |grad u2|`,
/// with intensities on the solver's 0–255 scale. Pixels carried outside
/// the frame have no data term.
fn energy(i0: &Img, i1: &Img, u1: &Img, u2: &Img, lambda: f64) -> f64 {
    let (w, h) = (i0.w, i0.h);
    let mut data = 0.0f64;
    let mut tv = 0.0f64;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (sx, sy) = (x as f32 + u1.d[i], y as f32 + u2.d[i]);
            if sx >= 0.0 && sy >= 0.0 && sx <= (w - 1) as f32 && sy <= (h - 1) as f32 {
                data += f64::from((i1.sample(sx, sy) - i0.d[i]).abs());
            }
            for u in [u1, u2] {
                let gx = if x + 1 < w { u.d[i + 1] - u.d[i] } else { 0.0 };
                let gy = if y + 1 < h { u.d[i + w] - u.d[i] } else { 0.0 };
                tv += f64::from(gx).hypot(f64::from(gy));
            }
        }
    }
    lambda * data + tv
}

fn to_solver_scale(f: &Frame) -> Img {
    Img { w: f.width(), h: f.height(), d: f.pixels().iter().map(|p| p * 255.0).collect() }
}

/// TV-L1 energy of a flow field for a frame pair at full resolution,
/// after the same presmoothing the solver applies.
pub fn flow_energy(prev: &Frame, next: &Frame, flow: &super::FlowField, lambda: f64) -> f64 {
    let i0 = blur(&to_solver_scale(prev), PRESMOOTH_SIGMA);
    let i1 = blur(&to_solver_scale(next), PRESMOOTH_SIGMA);
    let (w, h) = (flow.width(), flow.height());
    let u1 = Img { w, h, d: flow.u().to_vec() };
    let u2 = Img { w, h, d: flow.v().to_vec() };
    energy(&i0, &i1, &u1, &u2, lambda)
}

pub(super) fn solve(prev: &Frame, next: &Frame, cfg: &FlowConfig) -> (Vec<f32>, Vec<f32>, Vec<LevelTrace>) {
    let sizes = cfg.level_sizes(prev.width(), prev.height());
    let mut pyr0 = vec![blur(&to_solver_scale(prev), PRESMOOTH_SIGMA)];
    let mut pyr1 = vec![blur(&to_solver_scale(next), PRESMOOTH_SIGMA)];
    for &(w, h) in &sizes[1..] {
        let a = zoom_out(pyr0.last().unwrap(), w, h, cfg.pyramid_scale);
        let b = zoom_out(pyr1.last().unwrap(), w, h, cfg.pyramid_scale);
        pyr0.push(a);
        pyr1.push(b);
    }

    let coarsest = sizes.len() - 1;
    let (cw, ch) = sizes[coarsest];
    let mut u1 = Img::new(cw, ch);
    let mut u2 = Img::new(cw, ch);
    let mut traces = Vec::with_capacity(sizes.len());

    for level in (0..=coarsest).rev() {
        let (w, h) = sizes[level];
        if level != coarsest {
            let fx = w as f32 / u1.w as f32;
            let fy = h as f32 / u1.h as f32;
            u1 = zoom_in(&u1, w, h, fx);
            u2 = zoom_in(&u2, w, h, fy);
        }
        let trace = solve_level(&pyr0[level], &pyr1[level], &mut u1, &mut u2, cfg);
        traces.push(LevelTrace { width: w, height: h, energies: trace });
    }
    (u1.d, u2.d, traces)
}

fn solve_level(i0: &Img, i1: &Img, u1: &mut Img, u2: &mut Img, cfg: &FlowConfig) -> Vec<f64> {
    let (w, h) = (i0.w, i0.h);
    let n = w * h;
    let lambda = cfg.lambda_data as f32;
    let theta = cfg.theta as f32;
    let l_t = lambda * theta;
    let taut = (cfg.tau / cfg.theta) as f32;
    let eps2 = (cfg.stop_epsilon * cfg.stop_epsilon) as f32;

    let (i1x, i1y) = centered_gradient(i1);
    let mut p11 = vec![0.0f32; n];
    let mut p12 = vec![0.0f32; n];
    let mut p21 = vec![0.0f32; n];
    let mut p22 = vec![0.0f32; n];
    let mut v1 = vec![0.0f32; n];
    let mut v2 = vec![0.0f32; n];
    let mut div1 = vec![0.0f32; n];
    let mut div2 = vec![0.0f32; n];
    let mut g1x = vec![0.0f32; n];
    let mut g1y = vec![0.0f32; n];
    let mut g2x = vec![0.0f32; n];
    let mut g2y = vec![0.0f32; n];
    let mut i1w = vec![0.0f32; n];
    let mut i1wx = vec![0.0f32; n];
    let mut i1wy = vec![0.0f32; n];
    let mut grad = vec![0.0f32; n];
    let mut rho_c = vec![0.0f32; n];

    let mut energies = vec![energy(i0, i1, u1, u2, cfg.lambda_data)];

    for _warp in 0..cfg.warps_per_level {
        let saved = (u1.clone(), u2.clone());
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let (sx, sy) = (x as f32 + u1.d[i], y as f32 + u2.d[i]);
                if sx < 0.0 || sy < 0.0 || sx > (w - 1) as f32 || sy > (h - 1) as f32 {
                    // no evidence outside the frame; the regularizer fills in
                    i1w[i] = 0.0;
                    i1wx[i] = 0.0;
                    i1wy[i] = 0.0;
                    grad[i] = 0.0;
                    rho_c[i] = 0.0;
                    continue;
                }
                i1w[i] = i1.sample(sx, sy);
                i1wx[i] = i1x.sample(sx, sy);
                i1wy[i] = i1y.sample(sx, sy);
                grad[i] = i1wx[i] * i1wx[i] + i1wy[i] * i1wy[i];
                rho_c[i] = i1w[i] - i1wx[i] * u1.d[i] - i1wy[i] * u2.d[i] - i0.d[i];
            }
        }

        let mut iter = 0;
        let mut error = f32::INFINITY;
        while error > eps2 && iter < cfg.inner_iterations {
            iter += 1;
            for i in 0..n {
                let rho = rho_c[i] + i1wx[i] * u1.d[i] + i1wy[i] * u2.d[i];
                let (d1, d2) = if rho < -l_t * grad[i] {
                    (l_t * i1wx[i], l_t * i1wy[i])
                } else if rho > l_t * grad[i] {
                    (-l_t * i1wx[i], -l_t * i1wy[i])
                } else if grad[i] < GRAD_IS_ZERO {
                    (0.0, 0.0)
                } else {
                    let fi = -rho / grad[i];
                    (fi * i1wx[i], fi * i1wy[i])
                };
                v1[i] = u1.d[i] + d1;
                v2[i] = u2.d[i] + d2;
            }

            divergence(&p11, &p12, w, h, &mut div1);
            divergence(&p21, &p22, w, h, &mut div2);

            error = 0.0;
            for i in 0..n {
                let n1 = v1[i] + theta * div1[i];
                let n2 = v2[i] + theta * div2[i];
                error += (n1 - u1.d[i]) * (n1 - u1.d[i]) + (n2 - u2.d[i]) * (n2 - u2.d[i]);
                u1.d[i] = n1;
                u2.d[i] = n2;
            }
            error /= n as f32;

            forward_gradient(&u1.d, w, h, &mut g1x, &mut g1y);
            forward_gradient(&u2.d, w, h, &mut g2x, &mut g2y);
            for i in 0..n {
                let ng1 = 1.0 + taut * g1x[i].hypot(g1y[i]);
                let ng2 = 1.0 + taut * g2x[i].hypot(g2y[i]);
                p11[i] = (p11[i] + taut * g1x[i]) / ng1;
                p12[i] = (p12[i] + taut * g1y[i]) / ng1;
                p21[i] = (p21[i] + taut * g2x[i]) / ng2;
                p22[i] = (p22[i] + taut * g2y[i]) / ng2;
            }
        }

        if cfg.median_filter {
            *u1 = median3x3(u1);
            *u2 = median3x3(u2);
        }
        let e = energy(i0, i1, u1, u2, cfg.lambda_data);
        if e > *energies.last().expect("initial energy") {
            // a warp that raises the energy is undone; later warps would
            // start from the same state, so the level ends here
            let (s1, s2) = saved;
            *u1 = s1;
            *u2 = s2;
            break;
        }
        energies.push(e);
    }
    energies
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn divergence_is_negative_adjoint_of_gradient() {
        let (w, h) = (5, 4);
        let u: Vec<f32> = (0..w * h).map(|i| ((i * 7) % 11) as f32 * 0.3).collect();
        let p1: Vec<f32> = (0..w * h).map(|i| ((i * 5) % 13) as f32 * 0.1 - 0.4).collect();
        let p2: Vec<f32> = (0..w * h).map(|i| ((i * 3) % 7) as f32 * 0.2 - 0.5).collect();
        let mut gx = vec![0.0; w * h];
        let mut gy = vec![0.0; w * h];
        forward_gradient(&u, w, h, &mut gx, &mut gy);
        let mut div = vec![0.0; w * h];
        divergence(&p1, &p2, w, h, &mut div);
        let lhs: f32 = (0..w * h).map(|i| gx[i] * p1[i] + gy[i] * p2[i]).sum();
        let rhs: f32 = (0..w * h).map(|i| -u[i] * div[i]).sum();
        assert!((lhs - rhs).abs() < 1e-4, "{lhs} vs {rhs}");
    }

    #[test]
    fn median_removes_single_outlier() {
        let mut img = Img::new(5, 5);
        img.d[12] = 9.0;
        assert!(median3x3(&img).d.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bilinear_sample_interpolates() {
        let img = Img { w: 2, h: 2, d: vec![0.0, 1.0, 2.0, 3.0] };
        assert!((img.sample(0.5, 0.5) - 1.5).abs() < 1e-6);
        assert_eq!(img.sample(-3.0, 0.0), 0.0);
        assert_eq!(img.sample(9.0, 9.0), 3.0);
    }
}
