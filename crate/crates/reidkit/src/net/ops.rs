//! Pure single-sample operations on appearance maps and attention maps.

use ndarray::{Array1, Array2, Array3, Axis};

use crate::error::{Error, Result};

/// Denominator guard for weighted pooling: when the attention mass of a map
/// is at or below this, the pooled embedding is the zero vector.
pub const GWAP_DENOM_GUARD: f64 = 1e-6;

/// Pixel-wise part classification: per-pixel softmax over `G(h,w) P^T`,
/// producing `K+1` probability maps with channel 0 as background.
pub fn classify_pixels(g: &Array3<f64>, p: &Array2<f64>) -> Result<Array3<f64>> {
    let (h, w, c) = g.dim();
    let (classes, pc) = p.dim();
    if pc != c {
        return Err(Error::Shape(format!(
            "classifier expects {pc} channels, appearance map has {c}"
        )));
    }
    let mut m = Array3::zeros((h, w, classes));
    for y in 0..h {
        for x in 0..w {
            let mut logits = vec![0.0f64; classes];
            for (cls, logit) in logits.iter_mut().enumerate() {
                let mut acc = 0.0;
                for ch in 0..c {
                    acc += g[(y, x, ch)] * p[(cls, ch)];
                }
                *logit = acc;
            }
            let maxv = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for logit in logits.iter_mut() {
                *logit = (*logit - maxv).exp();
                sum += *logit;
            }
            for (cls, e) in logits.iter().enumerate() {
                m[(y, x, cls)] = e / sum;
            }
        }
    }
    Ok(m)
}

/// Foreground map: per-pixel max over the `K` part channels, background
/// excluded.
pub fn foreground_map(m: &Array3<f64>) -> Array2<f64> {
    let (h, w, classes) = m.dim();
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut best = f64::NEG_INFINITY;
            for k in 1..classes {
                best = best.max(m[(y, x, k)]);
            }
            out[(y, x)] = best;
        }
    }
    out
}

/// Global weighted average pooling: weighted spatial mean of `g` with
/// non-negative weights `m`; an (almost) zero weight mass yields the zero
/// vector.
pub fn gwap(g: &Array3<f64>, m: &Array2<f64>) -> Array1<f64> {
    let (h, w, c) = g.dim();
    debug_assert_eq!((h, w), m.dim());
    let mass: f64 = m.sum();
    if mass <= GWAP_DENOM_GUARD {
        return Array1::zeros(c);
    }
    let mut out = Array1::zeros(c);
    for y in 0..h {
        for x in 0..w {
            let weight = m[(y, x)];
            if weight != 0.0 {
                for ch in 0..c {
                    out[ch] += g[(y, x, ch)] * weight;
                }
            }
        }
    }
    out / mass
}

/// All pooled embeddings of one sample.
#[derive(Debug, Clone)]
pub struct PooledEmbeddings {
    pub f_g: Array1<f64>,
    pub f_f: Array1<f64>,
    /// Concatenation of the part embeddings, length `K*C`.
    pub f_c: Array1<f64>,
    /// Part embeddings, shape `(K, C)`.
    pub parts: Array2<f64>,
}

/// Pools the full embedding set: unweighted mean for `f_g`, foreground-map
/// weighted pooling for `f_f`, attention-weighted pooling per part, and the
/// concatenation `f_c`.
pub fn pool_embeddings(g: &Array3<f64>, m: &Array3<f64>) -> PooledEmbeddings {
    let (h, w, c) = g.dim();
    let classes = m.dim().2;
    let k = classes - 1;
    let uniform = Array2::from_elem((h, w), 1.0);
    let f_g = gwap(g, &uniform);
    let m_f = foreground_map(m);
    let f_f = gwap(g, &m_f);
    let mut parts = Array2::zeros((k, c));
    for part in 0..k {
        let map = m.index_axis(Axis(2), part + 1).to_owned();
        let emb = gwap(g, &map);
        parts.row_mut(part).assign(&emb);
    }
    let f_c = Array1::from_iter(parts.iter().copied());
    PooledEmbeddings { f_g, f_f, f_c, parts }
}

/// Binary visibility of one part map: 1 iff some pixel strictly exceeds
/// `lambda_v`.
pub fn visibility(m_k: &Array2<f64>, lambda_v: f64) -> u8 {
    let max = m_k.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    u8::from(max > lambda_v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::layers::randn;
    use ndarray::Array3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn classify_pixels_uniform_for_zero_weights() {
        let g = Array3::from_elem((2, 2, 4), 0.7);
        let p = Array2::zeros((3, 4));
        let m = classify_pixels(&g, &p).unwrap();
        for v in m.iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn classify_pixels_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = Array3::from_shape_fn((3, 4, 5), |_| randn(&mut rng));
        let p = Array2::from_shape_fn((4, 5), |_| randn(&mut rng));
        let m = classify_pixels(&g, &p).unwrap();
        for y in 0..3 {
            for x in 0..4 {
                let s: f64 = (0..4).map(|k| m[(y, x, k)]).sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn classify_pixels_matches_matmul_exp_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = Array3::from_shape_fn((3, 3, 4), |_| randn(&mut rng));
        let p = Array2::from_shape_fn((3, 4), |_| randn(&mut rng));
        let m = classify_pixels(&g, &p).unwrap();
        for y in 0..3 {
            for x in 0..3 {
                let logits: Vec<f64> = (0..3)
                    .map(|cls| (0..4).map(|c| g[(y, x, c)] * p[(cls, c)]).sum())
                    .collect();
                let z: f64 = logits.iter().map(|l| l.exp()).sum();
                for (cls, l) in logits.iter().enumerate() {
                    assert!((m[(y, x, cls)] - l.exp() / z).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn classify_pixels_rejects_dimension_mismatch() {
        let g = Array3::zeros((2, 2, 4));
        let p = Array2::zeros((3, 5));
        assert!(classify_pixels(&g, &p).is_err());
    }

    #[test]
    fn foreground_excludes_background_channel() {
        let mut m = Array3::zeros((1, 1, 3));
        m[(0, 0, 0)] = 0.2;
        m[(0, 0, 1)] = 0.5;
        m[(0, 0, 2)] = 0.3;
        let f = foreground_map(&m);
        assert_eq!(f[(0, 0)], 0.5);
    }

    #[test]
    fn foreground_is_identity_for_single_part() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = Array3::from_shape_fn((4, 2, 2), |_| rng.gen_range_01());
        let f = foreground_map(&m);
        for y in 0..4 {
            for x in 0..2 {
                assert_eq!(f[(y, x)], m[(y, x, 1)]);
            }
        }
    }

    trait Gen01 {
        fn gen_range_01(&mut self) -> f64;
    }
    impl Gen01 for ChaCha8Rng {
        fn gen_range_01(&mut self) -> f64 {
            use rand::Rng;
            self.gen()
        }
    }

    #[test]
    fn foreground_matches_per_pixel_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = Array3::from_shape_fn((5, 3, 4), |_| rng.gen_range_01());
        let f = foreground_map(&m);
        for y in 0..5 {
            for x in 0..3 {
                let expect = (1..4).map(|k| m[(y, x, k)]).fold(f64::NEG_INFINITY, f64::max);
                assert_eq!(f[(y, x)], expect);
            }
        }
    }

    #[test]
    fn gwap_uniform_weights_is_spatial_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = Array3::from_shape_fn((4, 3, 2), |_| randn(&mut rng));
        let m = Array2::from_elem((4, 3), 0.7);
        let f = gwap(&g, &m);
        for c in 0..2 {
            let mean: f64 = (0..4)
                .flat_map(|y| (0..3).map(move |x| (y, x)))
                .map(|(y, x)| g[(y, x, c)])
                .sum::<f64>()
                / 12.0;
            assert!((f[c] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn gwap_one_hot_selects_pixel() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = Array3::from_shape_fn((3, 3, 4), |_| randn(&mut rng));
        let mut m = Array2::zeros((3, 3));
        m[(1, 2)] = 1.0;
        let f = gwap(&g, &m);
        for c in 0..4 {
            assert!((f[c] - g[(1, 2, c)]).abs() < 1e-12);
        }
    }

    #[test]
    fn gwap_zero_mass_yields_zero_vector() {
        let g = Array3::from_elem((2, 2, 3), 5.0);
        let m = Array2::zeros((2, 2));
        let f = gwap(&g, &m);
        assert!(f.iter().all(|&v| v == 0.0));
        assert_eq!(visibility(&m, 0.4), 0);
    }

    #[test]
    fn pooled_concat_matches_parts_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = Array3::from_shape_fn((4, 3, 5), |_| randn(&mut rng));
        let m = {
            // random attention, normalized per pixel over 3+1 channels
            let raw = Array3::from_shape_fn((4, 3, 4), |_| rng.gen_range_01() + 0.01);
            let mut m = raw.clone();
            for y in 0..4 {
                for x in 0..3 {
                    let s: f64 = (0..4).map(|k| raw[(y, x, k)]).sum();
                    for k in 0..4 {
                        m[(y, x, k)] = raw[(y, x, k)] / s;
                    }
                }
            }
            m
        };
        let pooled = pool_embeddings(&g, &m);
        assert_eq!(pooled.f_c.len(), 15);
        for k in 0..3 {
            for c in 0..5 {
                assert_eq!(pooled.f_c[k * 5 + c], pooled.parts[(k, c)]);
            }
        }
        // loop oracle for every pooled embedding
        for (k, emb) in (0..3).map(|k| (k, pooled.parts.row(k))) {
            let mut mass = 0.0;
            let mut acc = vec![0.0; 5];
            for y in 0..4 {
                for x in 0..3 {
                    let wgt = m[(y, x, k + 1)];
                    mass += wgt;
                    for c in 0..5 {
                        acc[c] += g[(y, x, c)] * wgt;
                    }
                }
            }
            for c in 0..5 {
                assert!((emb[c] - acc[c] / mass).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn constant_map_pools_to_constant_vector() {
        let g = Array3::from_shape_fn((4, 3, 2), |(_, _, c)| c as f64 + 1.0);
        let m = {
            let mut m = Array3::from_elem((4, 3, 3), 1.0 / 3.0);
            m[(0, 0, 1)] = 0.5;
            m[(0, 0, 0)] = 0.2;
            m[(0, 0, 2)] = 0.3;
            m
        };
        let pooled = pool_embeddings(&g, &m);
        for (i, v) in pooled.f_g.iter().enumerate() {
            assert!((v - (i as f64 + 1.0)).abs() < 1e-12);
        }
        for (i, v) in pooled.f_f.iter().enumerate() {
            assert!((v - (i as f64 + 1.0)).abs() < 1e-12);
        }
        for k in 0..2 {
            for c in 0..2 {
                assert!((pooled.parts[(k, c)] - (c as f64 + 1.0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn visibility_strict_threshold() {
        let mut m = Array2::zeros((2, 2));
        m[(0, 0)] = 0.41;
        assert_eq!(visibility(&m, 0.4), 1);
        m[(0, 0)] = 0.40;
        assert_eq!(visibility(&m, 0.4), 0);
        m.fill(0.0);
        assert_eq!(visibility(&m, 0.4), 0);
    }
}
