//! Procedural clean sources for synthetic datasets.

use crate::image::Image;
use crate::rng::Rng;
use crate::scalar::Scalar;

/// Textured scene: oriented sinusoids, flat shapes with hard edges and mild
/// grain, squashed into `[0.05, 0.95]`.
pub fn texture<T: Scalar>(height: usize, width: usize, channels: usize, rng: &mut Rng) -> Image<T> {
    let mut acc = vec![0.0f64; height * width * channels];
    let base: Vec<f64> = (0..channels).map(|_| rng.range(0.3, 0.7)).collect();

    for _ in 0..4 {
        let freq = rng.range(0.02, 0.25);
        let theta = rng.range(0.0, std::f64::consts::PI);
        let phase = rng.range(0.0, std::f64::consts::TAU);
        let amp: Vec<f64> = (0..channels).map(|_| rng.range(-0.15, 0.15)).collect();
        let (fy, fx) = (freq * theta.sin(), freq * theta.cos());
        for r in 0..height {
            for c in 0..width {
                let v = (std::f64::consts::TAU * (fy * r as f64 + fx * c as f64) + phase).sin();
                for (ch, a) in amp.iter().enumerate() {
                    acc[(r * width + c) * channels + ch] += a * v;
                }
            }
        }
    }

    let shapes = 3 + rng.below(4);
    for _ in 0..shapes {
        let cy = rng.range(0.0, height as f64);
        let cx = rng.range(0.0, width as f64);
        let ry = rng.range(2.0, height as f64 / 3.0 + 2.0);
        let rx = rng.range(2.0, width as f64 / 3.0 + 2.0);
        let round = rng.coin(0.5);
        let shift: Vec<f64> = (0..channels).map(|_| rng.range(-0.25, 0.25)).collect();
        for r in 0..height {
            for c in 0..width {
                let dy = (r as f64 - cy) / ry;
                let dx = (c as f64 - cx) / rx;
                let inside = if round { dy * dy + dx * dx <= 1.0 } else { dy.abs() <= 1.0 && dx.abs() <= 1.0 };
                if inside {
                    for (ch, s) in shift.iter().enumerate() {
                        acc[(r * width + c) * channels + ch] += s;
                    }
                }
            }
        }
    }

    let data = acc
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let x = base[i % channels] + v + 0.02 * rng.normal();
            T::lit(0.05 + 0.9 * sigmoid(4.0 * (x - 0.5)))
        })
        .collect();
    Image::new(height, width, channels, data).expect("texture dims")
}

/// Smooth scene-depth field in `[0, max_depth]`: a tilted ground plane with
/// low-frequency relief.
pub fn depth_map<T: Scalar>(height: usize, width: usize, max_depth: f64, rng: &mut Rng) -> Image<T> {
    let tilt = rng.range(0.5, 1.0);
    let ang = rng.range(-0.6, 0.6);
    let f1 = rng.range(0.01, 0.05);
    let p1 = rng.range(0.0, std::f64::consts::TAU);
    Image::from_fn(height, width, 1, |r, c, _| {
        let y = 1.0 - r as f64 / (height.max(2) - 1) as f64;
        let x = c as f64 / (width.max(2) - 1) as f64 - 0.5;
        let plane = tilt * (y + ang * x).clamp(0.0, 1.5) / 1.5;
        let relief = 0.15 * (std::f64::consts::TAU * f1 * (r + c) as f64 + p1).sin();
        T::lit((max_depth * (plane + relief)).clamp(0.0, max_depth))
    })
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
