//! Synthetic lesion images: one irregular ellipse per image on a flat
//! background, with additive Gaussian noise.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{save_image, save_mask, DataError, Sample};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_images: usize,
    pub image_size: usize,
    /// Semi-axis range as a fraction of the image size.
    pub axis_range: (f64, f64),
    /// Intensity gap between lesion and background, per channel.
    pub contrast: f64,
    pub noise_sigma: f64,
    /// Peak relative radius perturbation.
    pub irregularity: f64,
    pub edge_width: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_images: 250,
            image_size: 64,
            axis_range: (0.15, 0.35),
            contrast: 0.4,
            noise_sigma: 0.05,
            irregularity: 0.15,
            edge_width: super::edge::DEFAULT_EDGE_WIDTH,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let (lo, hi) = self.axis_range;
        if self.image_size == 0 {
            return Err(DataError::Invalid("synth image_size must be positive".into()));
        }
        if !(lo > 0.0 && lo <= hi && hi <= 0.5) {
            return Err(DataError::Invalid(format!("synth axis range ({lo}, {hi}) must satisfy 0 < lo <= hi <= 0.5")));
        }
        if !(self.contrast > 0.0 && self.contrast <= 1.0) {
            return Err(DataError::Invalid(format!("synth contrast {} must be in (0, 1]", self.contrast)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(DataError::Invalid("synth noise_sigma must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.irregularity) {
            return Err(DataError::Invalid("synth irregularity must be in [0, 1)".into()));
        }
        // Smallest possible lesion must still cover 1% of the image, with slack
        // for rasterisation.
        let min_radius = lo * (1.0 - self.irregularity);
        if PI * min_radius * min_radius < 0.012 {
            return Err(DataError::Invalid(format!("synth axis range lower bound {lo} gives lesions under 1% of the image")));
        }
        Ok(())
    }

    /// Expected area in pixels of the unperturbed ellipse, `pi * E[a] * E[b]`.
    pub fn expected_ellipse_area(&self) -> f64 {
        let mean_axis = 0.5 * (self.axis_range.0 + self.axis_range.1) * self.image_size as f64;
        PI * mean_axis * mean_axis
    }
}

/// Parameters of one generated lesion, in pixel units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LesionParams {
    pub cx: f64,
    pub cy: f64,
    pub semi_a: f64,
    pub semi_b: f64,
    pub angle: f64,
    pub seed: u64,
}

/// Seed of image `index`, independent of how many images are generated.
fn image_seed(seed: u64, index: usize) -> u64 {
    super::mix64(seed ^ 0x5EED_0000_0000_0000, index as u64)
}

fn generate_one(cfg: &SynthConfig, index: usize) -> Result<(Sample, LesionParams), DataError> {
    let size = cfg.image_size;
    let sz = size as f64;
    let seed = image_seed(cfg.seed, index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let (lo, hi) = cfg.axis_range;
    let semi_a = rng.random_range(lo..=hi) * sz;
    let semi_b = rng.random_range(lo..=hi) * sz;
    let angle = rng.random_range(0.0..PI);
    let margin = (semi_a.max(semi_b) * (1.0 + cfg.irregularity)).min(sz / 2.0);
    let cx = rng.random_range(margin..=sz - margin);
    let cy = rng.random_range(margin..=sz - margin);
    let phase3 = rng.random_range(0.0..2.0 * PI);
    let phase5 = rng.random_range(0.0..2.0 * PI);

    let mut dark = [0.0; 3];
    for d in &mut dark {
        *d = rng.random_range(0.0..=1.0 - cfg.contrast);
    }

    let (sin, cos) = angle.sin_cos();
    let inside = |x: usize, y: usize| {
        let dx = x as f64 + 0.5 - cx;
        let dy = y as f64 + 0.5 - cy;
        let u = (dx * cos + dy * sin) / semi_a;
        let v = (-dx * sin + dy * cos) / semi_b;
        let phi = v.atan2(u);
        let radius = 1.0
            + cfg.irregularity * (0.6 * (3.0 * phi + phase3).sin() + 0.4 * (5.0 * phi + phase5).sin());
        (u * u + v * v).sqrt() <= radius
    };
    let mask = Tensor::<f32>::from_fn(Shape::new(1, 1, size, size), |[_, _, y, x]| {
        if inside(x, y) {
            1.0
        } else {
            0.0
        }
    });

    let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| DataError::Invalid(e.to_string()))?;
    let image = Tensor::<f32>::from_fn(Shape::new(1, 3, size, size), |[_, c, y, x]| {
        let base = if mask.at([0, 0, y, x]) == 1.0 {
            dark[c]
        } else {
            dark[c] + cfg.contrast
        };
        let n = if cfg.noise_sigma > 0.0 {
            noise.sample(&mut rng)
        } else {
            0.0
        };
        (base + n).clamp(0.0, 1.0) as f32
    });

    let id = format!("synth_{index:05}");
    let sample = Sample::new(id, image, mask, cfg.edge_width)?;
    Ok((
        sample,
        LesionParams {
            cx,
            cy,
            semi_a,
            semi_b,
            angle,
            seed,
        },
    ))
}

/// Generate the dataset in memory. A pure function of `cfg`.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Vec<(Sample, LesionParams)>, DataError> {
    cfg.validate()?;
    (0..cfg.n_images).map(|i| generate_one(cfg, i)).collect()
}

pub const MANIFEST_HEADER: &str = "id,cx,cy,semi_a,semi_b,angle,seed";

pub fn manifest_csv(items: &[(Sample, LesionParams)]) -> String {
    let mut out = format!("{MANIFEST_HEADER}\n");
    for (s, p) in items {
        writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            s.id, p.cx, p.cy, p.semi_a, p.semi_b, p.angle, p.seed
        )
        .unwrap();
    }
    out
}

/// Generate and write `images/<id>.ppm`, `masks/<id>.pgm` and `manifest.csv`.
pub fn write_synth_dataset(cfg: &SynthConfig, dir: &Path) -> Result<Vec<Sample>, DataError> {
    let items = synth_generate(cfg)?;
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| DataError::io(&p, e))?;
    }
    for (s, _) in &items {
        save_image(&s.image, &dir.join("images").join(format!("{}.ppm", s.id)))?;
        save_mask(&s.seg_mask, &dir.join("masks").join(format!("{}.pgm", s.id)))?;
    }
    let manifest = dir.join("manifest.csv");
    std::fs::write(&manifest, manifest_csv(&items)).map_err(|e| DataError::io(&manifest, e))?;
    Ok(items.into_iter().map(|(s, _)| s).collect())
}
