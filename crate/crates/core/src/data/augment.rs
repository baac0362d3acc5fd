//! Training-time augmentation: centred crop at a random scale, rotation,
//! flips and resize, applied identically to image and masks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{derive_edge_mask, fnv1a, mix64, DataError, Sample};
use crate::tensor::kernels::{bilinear_resize_forward, nearest_resize};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub flip_h_prob: f64,
    pub flip_v_prob: f64,
    /// Rotation range in degrees.
    pub rot_deg_range: (f64, f64),
    /// Crop side as a fraction of the input side.
    pub crop_scale_range: (f64, f64),
    pub out_size: usize,
    pub edge_width: usize,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_h_prob: 0.5,
            flip_v_prob: 0.5,
            rot_deg_range: (-10.0, 10.0),
            crop_scale_range: (0.5, 1.0),
            out_size: 64,
            edge_width: super::DEFAULT_EDGE_WIDTH,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// No randomness: only the final resize remains.
    pub fn identity(out_size: usize) -> Self {
        AugmentConfig {
            flip_h_prob: 0.0,
            flip_v_prob: 0.0,
            rot_deg_range: (0.0, 0.0),
            crop_scale_range: (1.0, 1.0),
            out_size,
            ..AugmentConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        for (name, p) in [("flip_h_prob", self.flip_h_prob), ("flip_v_prob", self.flip_v_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(DataError::Invalid(format!("augment {name} {p} is not a probability")));
            }
        }
        let (r0, r1) = self.rot_deg_range;
        if !(r0 <= r1 && r0.is_finite() && r1.is_finite()) {
            return Err(DataError::Invalid(format!("augment rotation range ({r0}, {r1}) is empty")));
        }
        let (c0, c1) = self.crop_scale_range;
        if !(c0 > 0.0 && c0 <= c1 && c1 <= 1.0) {
            return Err(DataError::Invalid(format!("augment crop range ({c0}, {c1}) must satisfy 0 < lo <= hi <= 1")));
        }
        if self.out_size == 0 {
            return Err(DataError::Invalid("augment out_size must be positive".into()));
        }
        Ok(())
    }
}

/// RNG for one sample in one epoch; independent of visiting order.
pub fn sample_rng(seed: u64, epoch: usize, id: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix64(mix64(seed, epoch as u64), fnv1a(id.as_bytes())))
}

fn uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    let u: f64 = rng.random();
    lo + (hi - lo) * u
}

/// Draws, made in a fixed order so every sample consumes the same stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraw {
    pub crop_scale: f64,
    pub angle_deg: f64,
    pub flip_h: bool,
    pub flip_v: bool,
}

impl AugmentDraw {
    pub fn sample<R: Rng>(cfg: &AugmentConfig, rng: &mut R) -> Self {
        let crop_scale = uniform(rng, cfg.crop_scale_range);
        let angle_deg = uniform(rng, cfg.rot_deg_range);
        let uh: f64 = rng.random();
        let uv: f64 = rng.random();
        AugmentDraw {
            crop_scale,
            angle_deg,
            flip_h: uh < cfg.flip_h_prob,
            flip_v: uv < cfg.flip_v_prob,
        }
    }
}

fn center_crop(t: &Tensor<f32>, ch: usize, cw: usize) -> Tensor<f32> {
    let s = t.shape();
    if (ch, cw) == (s.h(), s.w()) {
        return t.clone();
    }
    let (y0, x0) = ((s.h() - ch) / 2, (s.w() - cw) / 2);
    Tensor::from_fn(Shape::new(s.n(), s.c(), ch, cw), |[n, c, y, x]| t.at([n, c, y + y0, x + x0]))
}

/// Inverse-rotate output pixel centres into the source. Coordinates are
/// continuous with pixel `x` covering `[x, x+1)`.
fn source_point(x: usize, y: usize, w: usize, h: usize, sin: f64, cos: f64) -> (f64, f64) {
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
    (cx + cos * dx + sin * dy, cy - sin * dx + cos * dy)
}

/// Bilinear sampling with border replication.
fn rotate_bilinear(t: &Tensor<f32>, angle_deg: f64) -> Tensor<f32> {
    if angle_deg == 0.0 {
        return t.clone();
    }
    let s = t.shape();
    let (h, w) = (s.h(), s.w());
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    Tensor::from_fn(s, |[n, c, y, x]| {
        let (sx, sy) = source_point(x, y, w, h, sin, cos);
        let fx = (sx - 0.5).clamp(0.0, (w - 1) as f64);
        let fy = (sy - 0.5).clamp(0.0, (h - 1) as f64);
        let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
        let (ax, ay) = (fx - x0 as f64, fy - y0 as f64);
        let v = |yy, xx| t.at([n, c, yy, xx]) as f64;
        let top = (1.0 - ax) * v(y0, x0) + ax * v(y0, x1);
        let bot = (1.0 - ax) * v(y1, x0) + ax * v(y1, x1);
        ((1.0 - ay) * top + ay * bot) as f32
    })
}

/// Nearest sampling with zero fill outside the source.
fn rotate_nearest(t: &Tensor<f32>, angle_deg: f64) -> Tensor<f32> {
    if angle_deg == 0.0 {
        return t.clone();
    }
    let s = t.shape();
    let (h, w) = (s.h(), s.w());
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    Tensor::from_fn(s, |[n, c, y, x]| {
        let (sx, sy) = source_point(x, y, w, h, sin, cos);
        if sx < 0.0 || sy < 0.0 || sx >= w as f64 || sy >= h as f64 {
            0.0
        } else {
            t.at([n, c, sy as usize, sx as usize])
        }
    })
}

/// Mirror along width (`horizontal`) or height.
pub fn flip(t: &Tensor<f32>, horizontal: bool) -> Tensor<f32> {
    let s = t.shape();
    Tensor::from_fn(s, |[n, c, y, x]| {
        if horizontal {
            t.at([n, c, y, s.w() - 1 - x])
        } else {
            t.at([n, c, s.h() - 1 - y, x])
        }
    })
}

/// Apply `draw` to a sample. The edge mask is re-derived from the
/// transformed segmentation mask.
pub fn apply(sample: &Sample, draw: &AugmentDraw, out_size: usize, edge_width: usize) -> Result<Sample, DataError> {
    let (h, w) = (sample.height(), sample.width());
    let ch = ((h as f64 * draw.crop_scale).round() as usize).clamp(1, h);
    let cw = ((w as f64 * draw.crop_scale).round() as usize).clamp(1, w);
    let mut image = rotate_bilinear(&center_crop(&sample.image, ch, cw), draw.angle_deg);
    let mut mask = rotate_nearest(&center_crop(&sample.seg_mask, ch, cw), draw.angle_deg);
    for (on, horizontal) in [(draw.flip_h, true), (draw.flip_v, false)] {
        if on {
            image = flip(&image, horizontal);
            mask = flip(&mask, horizontal);
        }
    }
    if (ch, cw) != (out_size, out_size) {
        let resize = |e: crate::tensor::TensorError| DataError::Invalid(e.to_string());
        image = bilinear_resize_forward(&image, out_size, out_size).map_err(resize)?;
        mask = nearest_resize(&mask, out_size, out_size).map_err(resize)?;
    }
    let edge_mask = derive_edge_mask(&mask, edge_width)?;
    Ok(Sample {
        id: sample.id.clone(),
        image,
        seg_mask: mask,
        edge_mask,
    })
}

/// Draw augmentation parameters from `rng` and apply them.
pub fn augment<R: Rng>(sample: &Sample, cfg: &AugmentConfig, rng: &mut R) -> Result<Sample, DataError> {
    cfg.validate()?;
    let draw = AugmentDraw::sample(cfg, rng);
    apply(sample, &draw, cfg.out_size, cfg.edge_width)
}

/// Resize only, as used at evaluation time.
pub fn resize_only(sample: &Sample, out_size: usize, edge_width: usize) -> Result<Sample, DataError> {
    let draw = AugmentDraw {
        crop_scale: 1.0,
        angle_deg: 0.0,
        flip_h: false,
        flip_v: false,
    };
    apply(sample, &draw, out_size, edge_width)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(size: usize) -> Sample {
        let image = Tensor::from_fn(Shape::new(1, 3, size, size), |[_, c, y, x]| ((c + 2 * y + 3 * x) % 17) as f32 / 16.0);
        let mask = Tensor::from_fn(Shape::new(1, 1, size, size), |[_, _, y, x]| {
            ((y as isize - 8).pow(2) + (x as isize - 9).pow(2) < 25) as u8 as f32
        });
        Sample::new("s".into(), image, mask, 3).unwrap()
    }

    #[test]
    fn identity_config_is_identity_at_native_size() {
        let s = sample(16);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = augment(&s, &AugmentConfig::identity(16), &mut rng).unwrap();
        assert_eq!(out, s);
    }

    #[test]
    fn double_flip_is_identity() {
        let s = sample(16);
        for h in [true, false] {
            assert_eq!(flip(&flip(&s.image, h), h), s.image);
        }
    }

    #[test]
    fn zero_rotation_is_identity() {
        let s = sample(16);
        assert_eq!(rotate_bilinear(&s.image, 0.0), s.image);
        assert_eq!(rotate_nearest(&s.seg_mask, 0.0), s.seg_mask);
    }

    #[test]
    fn quarter_turn_matches_transpose_flip() {
        let s = sample(8);
        let r = rotate_nearest(&s.seg_mask, 90.0);
        for y in 0..8 {
            for x in 0..8 {
                // Source of (x, y) under a 90 degree turn is (y, 7 - x).
                assert_eq!(r.at([0, 0, y, x]), s.seg_mask.at([0, 0, 7 - x, y]));
            }
        }
    }

    #[test]
    fn keyed_rng_is_order_free() {
        let a: u64 = sample_rng(1, 2, "x").random();
        let b: u64 = sample_rng(1, 2, "x").random();
        let c: u64 = sample_rng(1, 3, "x").random();
        let d: u64 = sample_rng(1, 2, "y").random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn output_has_requested_size_and_binary_masks() {
        let s = sample(20);
        let cfg = AugmentConfig {
            out_size: 12,
            ..AugmentConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let out = augment(&s, &cfg, &mut rng).unwrap();
            assert_eq!(out.image.shape(), Shape::new(1, 3, 12, 12));
            assert!(out.seg_mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
            assert!(out.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn rejects_bad_ranges() {
        let s = sample(8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bad = AugmentConfig {
            flip_h_prob: 1.5,
            ..AugmentConfig::default()
        };
        assert!(augment(&s, &bad, &mut rng).is_err());
        let bad = AugmentConfig {
            crop_scale_range: (0.0, 1.0),
            ..AugmentConfig::default()
        };
        assert!(augment(&s, &bad, &mut rng).is_err());
    }
}
