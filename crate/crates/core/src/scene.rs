//! Procedural high-dynamic-range test scenes.
//!
//! A scene is a tinted vertical gradient with sinusoidal texture, a dark
//! shadow rectangle and a few bright Gaussian light sources, spanning roughly
//! three decades of radiance. The peak is normalized to 1.

use rand::Rng;

use crate::error::{ensure, Result};
use crate::image::RadianceImage;
use crate::numerics::Tensor;
use crate::rng::seeded;

pub fn synthetic_scene(height: usize, width: usize, seed: u64) -> Result<RadianceImage> {
    ensure!(height > 0 && width > 0, "scene must be non-empty");
    let mut rng = seeded(seed);
    let tint: [f64; 3] = [rng.random_range(0.7..1.0), rng.random_range(0.7..1.0), rng.random_range(0.7..1.0)];
    let base = rng.random_range(0.01..0.05);
    let top = rng.random_range(0.1..0.3);
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| (rng.random_range(2.0..9.0), rng.random_range(2.0..9.0), rng.random_range(0.0..6.3)))
        .collect();
    let shadow = {
        let (y0, x0) = (rng.random_range(0.0..0.6), rng.random_range(0.0..0.6));
        (y0, x0, y0 + rng.random_range(0.2..0.4), x0 + rng.random_range(0.2..0.4))
    };
    let lights: Vec<(f64, f64, f64, [f64; 3])> = (0..rng.random_range(1..=3))
        .map(|_| {
            let color = [rng.random_range(0.6..1.0), rng.random_range(0.6..1.0), rng.random_range(0.6..1.0)];
            (rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.03..0.12), color)
        })
        .collect();

    let data = (0..height * width * 3)
        .map(|i| {
            let c = i % 3;
            let px = i / 3;
            let v = (px / width) as f64 / (height.max(2) - 1) as f64;
            let u = (px % width) as f64 / (width.max(2) - 1) as f64;
            let texture: f64 = waves.iter().map(|&(fy, fx, ph)| (fy * v + fx * u + ph + c as f64 * 0.5).sin()).sum::<f64>() / 3.0;
            let mut r = (base + (top - base) * (1.0 - v)) * tint[c] * (1.0 + 0.6 * texture);
            if v >= shadow.0 && v < shadow.2 && u >= shadow.1 && u < shadow.3 {
                r *= 0.1;
            }
            for &(ly, lx, s, col) in &lights {
                let d2 = (v - ly).powi(2) + (u - lx).powi(2);
                r += col[c] * (-d2 / (2.0 * s * s)).exp();
            }
            r.max(0.0)
        })
        .collect::<Vec<f64>>();
    let peak = data.iter().cloned().fold(0.0, f64::max);
    RadianceImage::new(Tensor::new(&[height, width, 3], data.into_iter().map(|v| (v / peak) as f32).collect())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_normalized_deterministic_and_high_range() {
        let a = synthetic_scene(48, 40, 3).unwrap();
        assert_eq!(a, synthetic_scene(48, 40, 3).unwrap());
        assert_ne!(a, synthetic_scene(48, 40, 4).unwrap());
        let t = a.pixels();
        assert_eq!(t.max_value(), 1.0);
        assert!(t.min_value() > 0.0);
        assert!(t.max_value() / t.min_value() > 50.0);
    }
}
