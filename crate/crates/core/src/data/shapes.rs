use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Dataset;
use crate::numerics::Tensor;
use crate::Error;

pub const SHAPE_NAMES: [&str; 4] = ["circle", "square", "triangle", "cross"];

const SUPERSAMPLE: usize = 4;

#[derive(Clone, Copy)]
struct Placement {
    cx: f64,
    cy: f64,
    r: f64,
}

impl Placement {
    /// Whether the point lies inside shape `class`.
    fn contains(&self, class: usize, x: f64, y: f64) -> bool {
        let (dx, dy) = ((x - self.cx) / self.r, (y - self.cy) / self.r);
        match class {
            0 => dx * dx + dy * dy <= 1.0,
            1 => dx.abs() <= 0.8 && dy.abs() <= 0.8,
            2 => {
                // apex up, base at dy = 0.75
                dy <= 0.75 && dy >= -1.0 && dx.abs() <= (dy + 1.0) * 0.5
            }
            _ => (dx.abs() <= 0.28 && dy.abs() <= 1.0) || (dy.abs() <= 0.28 && dx.abs() <= 1.0),
        }
    }

    /// Fraction of the pixel at (px, py) covered by the shape.
    fn coverage(&self, class: usize, px: usize, py: usize) -> f64 {
        let step = 1.0 / SUPERSAMPLE as f64;
        let mut hits = 0;
        for sy in 0..SUPERSAMPLE {
            for sx in 0..SUPERSAMPLE {
                let x = px as f64 + (sx as f64 + 0.5) * step;
                let y = py as f64 + (sy as f64 + 0.5) * step;
                hits += usize::from(self.contains(class, x, y));
            }
        }
        hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64
    }
}

fn render(class: usize, side: usize, channels: usize, rng: &mut ChaCha8Rng, out: &mut Vec<f32>) {
    let s = side as f64;
    let r = rng.random_range(0.25 * s..0.4 * s);
    let place = Placement {
        cx: rng.random_range(r..s - r),
        cy: rng.random_range(r..s - r),
        r,
    };
    let background: Vec<f64> = (0..channels).map(|_| rng.random_range(0.0..0.2)).collect();
    let ink: Vec<f64> = (0..channels).map(|_| rng.random_range(0.7..1.0)).collect();
    for py in 0..side {
        for px in 0..side {
            let cov = place.coverage(class, px, py);
            for c in 0..channels {
                let noise = rng.random_range(-0.05..0.05);
                let v = (background[c] + noise) * (1.0 - cov) + ink[c] * cov;
                out.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
}

/// Renders `n` anti-aliased shapes (classes in [`SHAPE_NAMES`] order) at
/// random positions, sizes and intensities over noisy backgrounds.
///
/// Classes are balanced to within one sample and the sample order is
/// shuffled. Each image draws from its own stream of the seed, so the
/// output depends only on `(n, side, channels, classes, seed)`.
pub fn generate_shapes(n: usize, side: usize, channels: usize, classes: usize, seed: u64) -> Result<Dataset, Error> {
    if side < 16 {
        return Err(Error::Config(format!("image side {side} is too small to render shapes (minimum 16)")));
    }
    if !(2..=SHAPE_NAMES.len()).contains(&classes) {
        return Err(Error::Config(format!("shapes support 2 to 4 classes, got {classes}")));
    }
    if n < classes {
        return Err(Error::Config(format!("need at least {classes} samples, got {n}")));
    }
    if channels == 0 {
        return Err(Error::Config("channels must be positive".into()));
    }
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut data = Vec::with_capacity(n * side * side * channels);
    for (i, &class) in labels.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64 + 1);
        render(class, side, channels, &mut rng, &mut data);
    }
    Dataset::new(Tensor::new(vec![n, side, side, channels], data)?, labels)
}
