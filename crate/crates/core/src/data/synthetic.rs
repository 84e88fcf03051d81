use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, LabeledImage, NormStats};
use crate::error::{arg_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Square,
    Disk,
    Cross,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [ShapeKind::Square, ShapeKind::Disk, ShapeKind::Cross, ShapeKind::Triangle];

    /// Whether offset `(dx, dy)` from the centre lies inside a shape of radius `r`.
    fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            ShapeKind::Square => dx.abs() <= r && dy.abs() <= r,
            ShapeKind::Disk => dx * dx + dy * dy <= r * r,
            ShapeKind::Cross => {
                let t = r / 3.0;
                (dx.abs() <= t && dy.abs() <= r) || (dy.abs() <= t && dx.abs() <= r)
            }
            ShapeKind::Triangle => dy.abs() <= r && dx.abs() <= (dy + r) / 2.0,
        }
    }
}

/// `n` RGB images of size `hw×hw`, one filled shape per image on a noisy dark
/// background. Labels cycle through `kinds` so classes are balanced.
///
/// Normalization stats are computed from the generated images.
pub fn synthetic_shapes(n: usize, kinds: &[ShapeKind], hw: usize, seed: u64) -> Result<Dataset> {
    if hw < 8 {
        return Err(arg_err("synthetic_shapes", format!("image size {hw} is below the minimum of 8")));
    }
    if kinds.is_empty() || n < kinds.len() {
        return Err(arg_err("synthetic_shapes", format!("{n} images cannot cover {} classes", kinds.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plane = hw * hw;
    let s = hw as f64;
    let mut images = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % kinds.len();
        let kind = kinds[label];
        let r = rng.gen_range(s / 4.0..s / 3.0);
        let cy = rng.gen_range(r..s - 1.0 - r);
        let cx = rng.gen_range(r..s - 1.0 - r);
        let color: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.5..1.0));
        let mut pixels = vec![0.0; 3 * plane];
        for y in 0..hw {
            for x in 0..hw {
                let inside = kind.contains(x as f64 - cx, y as f64 - cy, r);
                for (c, &col) in color.iter().enumerate() {
                    let noise = rng.gen_range(0.0..0.25);
                    pixels[c * plane + y * hw + x] = if inside { col } else { noise };
                }
            }
        }
        images.push(LabeledImage { pixels, label, coarse_label: None, source: format!("synthetic:{seed}:{i}") });
    }
    let stats = NormStats::from_images(&images, 3)?;
    Dataset::new(images, kinds.len(), [3, hw, hw], stats)
}
