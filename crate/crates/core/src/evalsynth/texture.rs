use std::f64::consts::TAU;

use rand::Rng as _;

use crate::rng::rng_from_seed;

/// Band-limited texture: a handful of plane waves around mid-grey,
/// continuous in both coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Texture {
    waves: Vec<Wave>,
    mean: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Wave {
    fx: f64,
    fy: f64,
    phase: f64,
    amp: f64,
}

impl Texture {
    /// `waves` random plane waves with frequencies up to `max_freq`
    /// cycles/pixel per axis and peak excursion `contrast` around `mean`.
    pub fn random(seed: u64, waves: usize, max_freq: f64, mean: f64, contrast: f64) -> Self {
        let mut rng = rng_from_seed(seed);
        let mut ws: Vec<Wave> = (0..waves)
            .map(|_| {
                // keep every wave away from DC so each contributes gradient
                let r = rng.random_range(0.3..1.0) * max_freq;
                let a = rng.random_range(0.0..TAU);
                Wave {
                    fx: r * a.cos(),
                    fy: r * a.sin(),
                    phase: rng.random_range(0.0..TAU),
                    amp: rng.random_range(0.5..1.0),
                }
            })
            .collect();
        let total: f64 = ws.iter().map(|w| w.amp).sum();
        for w in &mut ws {
            w.amp *= contrast / total.max(f64::MIN_POSITIVE);
        }
        Self { waves: ws, mean }
    }

    pub fn flat(value: f64) -> Self {
        Self { waves: Vec::new(), mean: value }
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        self.mean + self.waves.iter().map(|w| w.amp * (TAU * (w.fx * x + w.fy * y) + w.phase).sin()).sum::<f64>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stays_in_range() {
        let t = Texture::random(3, 6, 0.125, 0.5, 0.4);
        for y in 0..64 {
            for x in 0..64 {
                let v = t.eval(x as f64 * 0.7, y as f64 * 1.3);
                assert!((0.1 - 1e-12..=0.9 + 1e-12).contains(&v));
            }
        }
        assert_eq!(t, Texture::random(3, 6, 0.125, 0.5, 0.4));
        assert_eq!(Texture::flat(0.25).eval(5.0, 9.0), 0.25);
    }
}
