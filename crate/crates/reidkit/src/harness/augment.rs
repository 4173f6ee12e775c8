//! Training-time augmentation: pad-then-random-crop and random erasing,
//! drawn as an explicit plan so the same shift can be applied to the image
//! and to its parsing labels.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::harness::config::AugmentSection;

/// One sample's augmentation draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugPlan {
    /// Translation in pixels (positive moves content down/right).
    pub dy: isize,
    pub dx: isize,
    /// Erased rectangle `(y0, x0, h, w)` in output coordinates, if any.
    pub erase: Option<(usize, usize, usize, usize)>,
    erase_seed: u64,
}

impl AugPlan {
    pub fn identity() -> Self {
        Self {
            dy: 0,
            dx: 0,
            erase: None,
            erase_seed: 0,
        }
    }

    /// Draws a plan: crop offset uniform in `[-pad, pad]` per axis, erasing
    /// with the configured probability over a rectangle of 2%-20% of the
    /// image area with aspect ratio in [0.3, 3.3].
    pub fn draw(cfg: &AugmentSection, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Self {
        let p = cfg.pad as isize;
        let dy = rng.gen_range(-p..=p);
        let dx = rng.gen_range(-p..=p);
        let erase = if rng.gen::<f64>() < cfg.erase_prob {
            let area = (h * w) as f64;
            // rejection-free draw: clamp the rectangle into the frame
            let target = rng.gen_range(0.02..0.20) * area;
            let aspect = rng.gen_range(0.3..3.3);
            let eh = ((target * aspect).sqrt().round() as usize).clamp(1, h);
            let ew = ((target / aspect).sqrt().round() as usize).clamp(1, w);
            let y0 = rng.gen_range(0..=(h - eh));
            let x0 = rng.gen_range(0..=(w - ew));
            Some((y0, x0, eh, ew))
        } else {
            None
        };
        Self {
            dy,
            dx,
            erase,
            erase_seed: rng.gen(),
        }
    }

    /// Applies the plan to an image: translation with edge replication, then
    /// noise in the erased rectangle.
    pub fn apply_image(&self, image: &Array3<f64>) -> Array3<f64> {
        let (h, w, c) = image.dim();
        let mut out = Array3::zeros((h, w, c));
        for y in 0..h {
            let sy = (y as isize - self.dy).clamp(0, h as isize - 1) as usize;
            for x in 0..w {
                let sx = (x as isize - self.dx).clamp(0, w as isize - 1) as usize;
                for ch in 0..c {
                    out[(y, x, ch)] = image[(sy, sx, ch)];
                }
            }
        }
        if let Some((y0, x0, eh, ew)) = self.erase {
            let mut rng: ChaCha8Rng = rand::SeedableRng::seed_from_u64(self.erase_seed);
            for y in y0..y0 + eh {
                for x in x0..x0 + ew {
                    for ch in 0..c {
                        out[(y, x, ch)] = rng.gen();
                    }
                }
            }
        }
        out
    }

    /// Applies the same translation to a label map; pixels shifted in from
    /// outside the frame become background. Erasing leaves labels unchanged.
    pub fn apply_labels(&self, labels: &Array2<u8>) -> Array2<u8> {
        let (h, w) = labels.dim();
        let mut out = Array2::zeros((h, w));
        for y in 0..h {
            let sy = y as isize - self.dy;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = x as isize - self.dx;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                out[(y, x)] = labels[(sy as usize, sx as usize)];
            }
        }
        out
    }

    /// Applies the same translation to a multi-channel field map with zero
    /// fill outside the frame.
    pub fn apply_fields(&self, fields: &Array3<f64>) -> Array3<f64> {
        let (h, w, c) = fields.dim();
        let mut out = Array3::zeros((h, w, c));
        for y in 0..h {
            let sy = y as isize - self.dy;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = x as isize - self.dx;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                for ch in 0..c {
                    out[(y, x, ch)] = fields[(sy as usize, sx as usize, ch)];
                }
            }
        }
        out
    }
}
