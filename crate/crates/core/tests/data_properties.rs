use banet::data::augment::{augment, AugmentConfig};
use banet::data::{derive_edge_mask, synth_generate, Sample, SynthConfig};
use banet::tensor::{Shape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn mask_from_bits(h: usize, w: usize, bits: &[bool]) -> Tensor<f32> {
    Tensor::from_fn(Shape::new(1, 1, h, w), |[_, _, y, x]| bits[y * w + x] as u8 as f32)
}

/// Foreground pixels with a background 4-neighbour; outside counts as background.
fn boundary(m: &Tensor<f32>) -> Vec<(usize, usize)> {
    let (h, w) = (m.shape().h(), m.shape().w());
    let fg = |y: isize, x: isize| y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && m.at([0, 0, y as usize, x as usize]) == 1.0;
    let mut out = Vec::new();
    for y in 0..h as isize {
        for x in 0..w as isize {
            if fg(y, x) && !(fg(y - 1, x) && fg(y + 1, x) && fg(y, x - 1) && fg(y, x + 1)) {
                out.push((y as usize, x as usize));
            }
        }
    }
    out
}

fn chebyshev(a: (usize, usize), b: (usize, usize)) -> usize {
    a.0.abs_diff(b.0).max(a.1.abs_diff(b.1))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn edge_band_surrounds_the_boundary(
        (h, w, bits) in (3usize..14, 3usize..14).prop_flat_map(|(h, w)| (Just(h), Just(w), prop::collection::vec(any::<bool>(), h * w))),
        half in 0usize..3,
    ) {
        let width = 2 * half + 1;
        let m = mask_from_bits(h, w, &bits);
        let edge = derive_edge_mask(&m, width).unwrap();
        let b = boundary(&m);
        for &p in &b {
            prop_assert_eq!(edge.at([0, 0, p.0, p.1]), 1.0, "boundary pixel {:?} uncovered", p);
        }
        for y in 0..h {
            for x in 0..w {
                let e = edge.at([0, 0, y, x]);
                prop_assert!(e == 0.0 || e == 1.0);
                let near = b.iter().map(|&q| chebyshev((y, x), q)).min();
                if e == 1.0 {
                    prop_assert!(near.is_some_and(|d| d <= half + 1), "edge pixel ({}, {}) far from the boundary", y, x);
                }
                // The square dilation is exactly the band of half-width `half`.
                prop_assert_eq!(e == 1.0, near.is_some_and(|d| d <= half));
            }
        }
    }

    #[test]
    fn augmentation_keeps_masks_binary_and_images_in_range(
        seed in any::<u64>(),
        size in 12usize..40,
        out in prop::sample::select(vec![8usize, 16, 24, 32]),
        rot in 0.0f64..30.0,
        crop_lo in 0.3f64..1.0,
    ) {
        let data = synth_generate(&SynthConfig { n_images: 1, image_size: size, seed, ..SynthConfig::default() }).unwrap();
        let cfg = AugmentConfig {
            rot_deg_range: (-rot, rot),
            crop_scale_range: (crop_lo, 1.0),
            out_size: out,
            ..AugmentConfig::default()
        };
        let s = augment(&data[0].0, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(s.image.shape(), Shape::new(1, 3, out, out));
        prop_assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(s.seg_mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
        prop_assert_eq!(&s.edge_mask, &derive_edge_mask(&s.seg_mask, cfg.edge_width).unwrap());
    }

    #[test]
    fn augmented_image_tracks_augmented_mask(seed in any::<u64>(), r in 0.15f64..0.3) {
        // A disc well inside the frame, so border handling never differs.
        let n = 48;
        let c = (n as f64 - 1.0) / 2.0;
        let mask = Tensor::from_fn(Shape::new(1, 1, n, n), |[_, _, y, x]| {
            let (dy, dx) = (y as f64 - c, x as f64 - c);
            ((dy * dy + dx * dx).sqrt() <= r * n as f64) as u8 as f32
        });
        let image = Tensor::from_fn(Shape::new(1, 3, n, n), |[_, _, y, x]| mask.at([0, 0, y, x]));
        let sample = Sample::new("disc".into(), image, mask, 1).unwrap();
        let cfg = AugmentConfig { out_size: 32, ..AugmentConfig::default() };
        let s = augment(&sample, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let b = boundary(&s.seg_mask);
        let inverse = s.seg_mask.map(|v| 1.0 - v);
        let outer = boundary(&inverse);
        for y in 0..32 {
            for x in 0..32 {
                let m = s.seg_mask.at([0, 0, y, x]);
                for ch in 0..3 {
                    let v = s.image.at([0, ch, y, x]);
                    if (v - m).abs() > 0.5 {
                        let d = b.iter().chain(&outer).map(|&q| chebyshev((y, x), q)).min().unwrap_or(usize::MAX);
                        prop_assert!(d <= 1, "image and mask disagree at ({}, {}) away from the edge", y, x);
                    }
                }
            }
        }
    }
}

#[test]
fn mean_synthetic_area_matches_the_ellipse_expectation() {
    let cfg = SynthConfig {
        n_images: 1000,
        image_size: 64,
        seed: 99,
        ..SynthConfig::default()
    };
    let data = synth_generate(&cfg).unwrap();
    let mean: f64 = data.iter().map(|(s, _)| s.seg_mask.sum() as f64).sum::<f64>() / data.len() as f64;
    // Independent semi-axes, each uniform on the configured range.
    let (lo, hi) = cfg.axis_range;
    let side = cfg.image_size as f64;
    let expected = std::f64::consts::PI * (0.5 * (lo + hi) * side).powi(2);
    let rel = (mean - expected).abs() / expected;
    assert!(rel <= 0.2, "mean area {mean:.1} vs expected {expected:.1}");
}

#[test]
fn every_synthetic_mask_covers_at_least_one_percent() {
    let cfg = SynthConfig {
        n_images: 300,
        image_size: 32,
        axis_range: (0.1, 0.4),
        irregularity: 0.3,
        seed: 5,
        ..SynthConfig::default()
    };
    for (s, _) in synth_generate(&cfg).unwrap() {
        assert!(s.seg_mask.sum() as f64 >= 0.01 * 32.0 * 32.0, "{} too small", s.id);
    }
}

#[test]
fn generation_is_a_pure_function_of_the_config() {
    let cfg = SynthConfig {
        n_images: 6,
        image_size: 24,
        seed: 11,
        ..SynthConfig::default()
    };
    let a = synth_generate(&cfg).unwrap();
    let b = synth_generate(&cfg).unwrap();
    for ((sa, pa), (sb, pb)) in a.iter().zip(&b) {
        assert_eq!(sa.id, sb.id);
        assert_eq!(pa, pb);
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&sa.image), bits(&sb.image));
        assert_eq!(bits(&sa.seg_mask), bits(&sb.seg_mask));
    }
    let other = synth_generate(&SynthConfig { seed: 12, ..cfg }).unwrap();
    assert_ne!(a[0].0.image, other[0].0.image);
}
