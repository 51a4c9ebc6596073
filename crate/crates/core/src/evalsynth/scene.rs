use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::texture::Texture;
use crate::boxdetect::MotionBox;
use crate::error::{Error, Result};
use crate::flow::Frame;
use crate::rng::rng_from_seed;

/// A synthetic scene: a textured square sprite over a textured background,
/// filmed by a camera that may pan.
///
/// Positions are in pixels. The sprite moves by `velocity` per frame in
/// scene coordinates; the pan adds `pan` per frame to everything on
/// screen. A `sprite_size` of zero renders the background alone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub sprite_size: usize,
    pub sprite_seed: u64,
    pub start: (f64, f64),
    pub velocity: (f64, f64),
    pub background_seed: u64,
    #[serde(default)]
    pub pan: (f64, f64),
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub label: Option<usize>,
    /// Textures are flat when set; for degenerate-path tests.
    #[serde(default)]
    pub flat: bool,
}

pub const BACKGROUND_WAVES: usize = 6;
pub const BACKGROUND_MAX_FREQ: f64 = 0.125;
pub const SPRITE_WAVES: usize = 4;
pub const SPRITE_MAX_FREQ: f64 = 0.2;

impl SceneSpec {
    /// Top-left sprite corner on screen in frame `t`.
    pub fn sprite_position(&self, t: usize) -> (i64, i64) {
        let t = t as f64;
        (
            (self.start.0 + (self.velocity.0 + self.pan.0) * t).round() as i64,
            (self.start.1 + (self.velocity.1 + self.pan.1) * t).round() as i64,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.width < 8 || self.height < 8 {
            return bad(format!("frames must be at least 8x8, got {}x{}", self.width, self.height));
        }
        if self.frames == 0 {
            return bad("a scene needs at least one frame".into());
        }
        let finite =
            [self.start.0, self.start.1, self.velocity.0, self.velocity.1, self.pan.0, self.pan.1, self.noise_sigma];
        if finite.iter().any(|v| !v.is_finite()) {
            return bad("positions, velocities and noise must be finite".into());
        }
        if self.noise_sigma < 0.0 {
            return bad(format!("noise sigma must be non-negative, got {}", self.noise_sigma));
        }
        if self.sprite_size == 0 {
            return Ok(());
        }
        let s = self.sprite_size as i64;
        for t in 0..self.frames {
            let (x, y) = self.sprite_position(t);
            if x < 0 || y < 0 || x + s > self.width as i64 || y + s > self.height as i64 {
                return bad(format!("sprite leaves the frame at frame {t} (corner {x},{y})"));
            }
        }
        Ok(())
    }

    /// Sprite box on screen in frame `t`, if the scene has a sprite.
    pub fn sprite_box(&self, t: usize) -> Option<MotionBox> {
        if self.sprite_size == 0 {
            return None;
        }
        let (x, y) = self.sprite_position(t);
        let (x, y) = (x as usize, y as usize);
        Some(MotionBox { x0: x, y0: y, x1: x + self.sprite_size, y1: y + self.sprite_size })
    }

    fn textures(&self) -> (Texture, Texture) {
        if self.flat {
            return (Texture::flat(0.3), Texture::flat(0.7));
        }
        (
            Texture::random(self.background_seed, BACKGROUND_WAVES, BACKGROUND_MAX_FREQ, 0.5, 0.4),
            Texture::random(self.sprite_seed, SPRITE_WAVES, SPRITE_MAX_FREQ, 0.5, 0.45),
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedClip {
    pub frames: Vec<Frame>,
    /// Sprite box per frame; the full frame when there is no sprite.
    pub boxes: Vec<MotionBox>,
    pub union: MotionBox,
}

/// Renders `spec`; `seed` drives the sensor noise only.
pub fn gen_clip(spec: &SceneSpec, seed: u64) -> Result<GeneratedClip> {
    spec.validate()?;
    let (bg, sprite) = spec.textures();
    let (w, h) = (spec.width, spec.height);
    let mut rng = rng_from_seed(seed);
    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0)).map_err(|e| Error::InvalidSpec(e.to_string()))?;
    let mut frames = Vec::with_capacity(spec.frames);
    let mut boxes = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        let sb = spec.sprite_box(t);
        let (ox, oy) = (spec.pan.0 * t as f64, spec.pan.1 * t as f64);
        let mut px = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let mut v = match sb {
                    Some(b) if b.contains(x, y) => sprite.eval((x - b.x0) as f64, (y - b.y0) as f64),
                    _ => bg.eval(x as f64 - ox, y as f64 - oy),
                };
                if spec.noise_sigma > 0.0 {
                    v += noise.sample(&mut rng);
                }
                px.push(v.clamp(0.0, 1.0) as f32);
            }
        }
        frames.push(Frame::new(w, h, px)?);
        boxes.push(sb.unwrap_or(MotionBox::full_frame(w, h)));
    }
    let union = boxes.iter().skip(1).fold(boxes[0], |acc, b| acc.union(b));
    Ok(GeneratedClip { frames, boxes, union })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn spec() -> SceneSpec {
        SceneSpec {
            width: 64,
            height: 64,
            frames: 4,
            sprite_size: 32,
            sprite_seed: 1,
            start: (10.0, 10.0),
            velocity: (0.0, 0.0),
            background_seed: 2,
            pan: (0.0, 0.0),
            noise_sigma: 0.0,
            label: None,
            flat: false,
        }
    }

    #[test]
    fn sprite_box_bookkeeping() {
        let c = gen_clip(&spec(), 0).unwrap();
        assert_eq!(c.boxes[0], MotionBox { x0: 10, y0: 10, x1: 42, y1: 42 });
        assert!(c.boxes.iter().all(|b| *b == c.boxes[0]));
        assert_eq!(c.union, c.boxes[0]);
    }

    #[test]
    fn seeded_noise_reproduces() {
        let mut s = spec();
        s.noise_sigma = 0.05;
        assert_eq!(gen_clip(&s, 4).unwrap(), gen_clip(&s, 4).unwrap());
        assert_ne!(gen_clip(&s, 4).unwrap().frames, gen_clip(&s, 5).unwrap().frames);
    }

    #[test]
    fn escaping_sprite_is_rejected() {
        let mut s = spec();
        s.velocity = (12.0, 0.0);
        assert!(matches!(gen_clip(&s, 0), Err(Error::InvalidSpec(_))));
        s.velocity = (0.0, 0.0);
        s.start = (-1.0, 0.0);
        assert!(matches!(gen_clip(&s, 0), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn sprite_pixels_lie_in_the_box() {
        let mut s = spec();
        s.velocity = (2.0, 1.0);
        s.pan = (1.0, 0.0);
        s.flat = true;
        let c = gen_clip(&s, 0).unwrap();
        for (f, b) in c.frames.iter().zip(&c.boxes) {
            for y in 0..64 {
                for x in 0..64 {
                    assert_eq!(f.get(x, y) == 0.7f32, b.contains(x, y));
                }
            }
        }
    }

    #[test]
    fn pan_shifts_background() {
        let mut s = spec();
        s.sprite_size = 0;
        s.pan = (2.0, 0.0);
        let c = gen_clip(&s, 0).unwrap();
        for y in 0..64 {
            for x in 2..64 {
                assert!((c.frames[1].get(x, y) - c.frames[0].get(x - 2, y)).abs() < 1e-6);
            }
        }
    }
}
