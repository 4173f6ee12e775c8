//! Layered 2-D body rendering: eleven atomic regions as ellipses and
//! rectangles in normalized coordinates, rasterized into an atom label map.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Number of atomic body regions, matching [`crate::fields::ATOM_NAMES`].
pub const NUM_ATOMS: usize = 11;

#[derive(Debug, Clone, Copy)]
pub enum Shape {
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
}

impl Shape {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Ellipse { cx, cy, rx, ry } => {
                let dx = (x - cx) / rx;
                let dy = (y - cy) / ry;
                dx * dx + dy * dy <= 1.0
            }
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x < x1 && y >= y0 && y < y1,
        }
    }

    fn transformed(&self, dx: f64, dy: f64, scale: f64, width_factor: f64) -> Shape {
        let tx = |x: f64| 0.5 + (x - 0.5) * scale * width_factor + dx;
        let ty = |y: f64| 0.5 + (y - 0.5) * scale + dy;
        match *self {
            Shape::Ellipse { cx, cy, rx, ry } => Shape::Ellipse {
                cx: tx(cx),
                cy: ty(cy),
                rx: rx * scale * width_factor,
                ry: ry * scale,
            },
            Shape::Rect { x0, y0, x1, y1 } => Shape::Rect {
                x0: tx(x0),
                y0: ty(y0),
                x1: tx(x1),
                y1: ty(y1),
            },
        }
    }
}

/// Base layout of the eleven atoms in normalized (x across width, y down
/// height) coordinates; index order matches [`crate::fields::ATOM_NAMES`].
fn base_layout() -> [Shape; NUM_ATOMS] {
    [
        // head
        Shape::Ellipse { cx: 0.50, cy: 0.10, rx: 0.16, ry: 0.055 },
        // upper torso
        Shape::Rect { x0: 0.28, y0: 0.16, x1: 0.72, y1: 0.33 },
        // lower torso
        Shape::Rect { x0: 0.30, y0: 0.33, x1: 0.70, y1: 0.48 },
        // upper right arm
        Shape::Rect { x0: 0.08, y0: 0.17, x1: 0.26, y1: 0.33 },
        // lower right arm
        Shape::Rect { x0: 0.08, y0: 0.33, x1: 0.24, y1: 0.48 },
        // upper left arm
        Shape::Rect { x0: 0.74, y0: 0.17, x1: 0.92, y1: 0.33 },
        // lower left arm
        Shape::Rect { x0: 0.76, y0: 0.33, x1: 0.92, y1: 0.48 },
        // right leg
        Shape::Rect { x0: 0.30, y0: 0.48, x1: 0.48, y1: 0.82 },
        // left leg
        Shape::Rect { x0: 0.52, y0: 0.48, x1: 0.70, y1: 0.82 },
        // right foot
        Shape::Rect { x0: 0.26, y0: 0.82, x1: 0.48, y1: 0.92 },
        // left foot
        Shape::Rect { x0: 0.52, y0: 0.82, x1: 0.74, y1: 0.92 },
    ]
}

/// Draw order for rasterization, later entries overwrite earlier ones: torso
/// first, then legs and feet, arms on top of the torso sides, head last.
const Z_ORDER: [usize; NUM_ATOMS] = [1, 2, 7, 8, 9, 10, 3, 4, 5, 6, 0];

/// Small pose perturbation applied to the whole body plus per-atom jitter.
#[derive(Debug, Clone)]
pub struct PoseParams {
    pub dx: f64,
    pub dy: f64,
    pub scale: f64,
    pub atom_jitter: Vec<(f64, f64)>,
}

impl PoseParams {
    pub fn neutral() -> Self {
        Self {
            dx: 0.0,
            dy: 0.0,
            scale: 1.0,
            atom_jitter: vec![(0.0, 0.0); NUM_ATOMS],
        }
    }

    pub fn sample(rng: &mut ChaCha8Rng) -> Self {
        Self {
            dx: rng.gen_range(-0.025..0.025),
            dy: rng.gen_range(-0.015..0.015),
            scale: rng.gen_range(0.92..1.03),
            atom_jitter: (0..NUM_ATOMS)
                .map(|_| (rng.gen_range(-0.01..0.01), rng.gen_range(-0.008..0.008)))
                .collect(),
        }
    }
}

/// Atom shapes for an identity with a given pose; `width_factor` is the
/// per-identity body width.
pub fn posed_shapes(pose: &PoseParams, width_factor: f64) -> [Shape; NUM_ATOMS] {
    let base = base_layout();
    let mut out = base;
    for (i, shape) in base.iter().enumerate() {
        let (jx, jy) = pose.atom_jitter[i];
        out[i] = shape.transformed(pose.dx + jx, pose.dy + jy, pose.scale, width_factor);
    }
    out
}

/// Rasterizes the posed atoms into a per-pixel atom index map (-1 for
/// background) at `height x width`, honoring the fixed draw order.
pub fn rasterize_atoms(shapes: &[Shape; NUM_ATOMS], height: usize, width: usize) -> Vec<i8> {
    let mut map = vec![-1i8; height * width];
    for &atom in &Z_ORDER {
        let shape = shapes[atom];
        for y in 0..height {
            let ny = (y as f64 + 0.5) / height as f64;
            for x in 0..width {
                let nx = (x as f64 + 0.5) / width as f64;
                if shape.contains(nx, ny) {
                    map[y * width + x] = atom as i8;
                }
            }
        }
    }
    map
}

/// Rasterizes a subset of atoms of another identity (used as a pedestrian
/// occluder), translated by `(dx, dy)` in normalized coordinates.
pub fn rasterize_subset(
    shapes: &[Shape; NUM_ATOMS],
    atoms: &[usize],
    dx: f64,
    dy: f64,
    height: usize,
    width: usize,
) -> Vec<i8> {
    let mut map = vec![-1i8; height * width];
    for &atom in atoms {
        let shape = match shapes[atom] {
            Shape::Ellipse { cx, cy, rx, ry } => Shape::Ellipse {
                cx: cx + dx,
                cy: cy + dy,
                rx,
                ry,
            },
            Shape::Rect { x0, y0, x1, y1 } => Shape::Rect {
                x0: x0 + dx,
                y0: y0 + dy,
                x1: x1 + dx,
                y1: y1 + dy,
            },
        };
        for y in 0..height {
            let ny = (y as f64 + 0.5) / height as f64;
            for x in 0..width {
                let nx = (x as f64 + 0.5) / width as f64;
                if shape.contains(nx, ny) {
                    map[y * width + x] = atom as i8;
                }
            }
        }
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn neutral_pose_keeps_body_inside_frame() {
        let shapes = posed_shapes(&PoseParams::neutral(), 1.0);
        let map = rasterize_atoms(&shapes, 64, 32);
        // border pixels stay background
        for x in 0..32 {
            assert_eq!(map[x], -1);
            assert_eq!(map[63 * 32 + x], -1);
        }
        assert!(map.iter().any(|&a| a >= 0));
    }

    #[test]
    fn every_atom_is_rendered_for_sampled_poses() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let pose = PoseParams::sample(&mut rng);
            let shapes = posed_shapes(&pose, 0.95);
            let map = rasterize_atoms(&shapes, 64, 32);
            for atom in 0..NUM_ATOMS as i8 {
                assert!(
                    map.iter().any(|&a| a == atom),
                    "atom {atom} missing from frame"
                );
            }
        }
    }
}
