//! Coarse human parsing labels from body-region confidence fields.
//!
//! A [`FieldStack`] holds per-pixel confidence maps for body regions (the 36
//! PifPaf confidence/affinity fields for real data, or the synthetic
//! per-region channels emitted by [`crate::synthgen`]). Channels are grouped
//! into `K` body parts with a [`PartGrouping`], reduced by a pixel-wise max
//! into [`GroupedFields`], and thresholded into a [`ParsingLabelMap`] whose
//! values are `0` (background) or `1..=K`.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

/// Per-image stack of body-region confidence maps, shape `(H, W, F)`,
/// values in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct FieldStack {
    pub data: Array3<f64>,
    pub field_names: Vec<String>,
}

impl FieldStack {
    pub fn new(data: Array3<f64>, field_names: Vec<String>) -> Result<Self> {
        let (h, w, f) = data.dim();
        if h == 0 || w == 0 || f == 0 {
            return Err(Error::Shape(format!("empty field stack {h}x{w}x{f}")));
        }
        if field_names.len() != f {
            return Err(Error::Shape(format!(
                "{} field names for {f} channels",
                field_names.len()
            )));
        }
        if data.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Shape("field values must lie in [0, 1]".into()));
        }
        Ok(Self { data, field_names })
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }

    /// Writes the `FSTK` binary format: magic bytes, `H`, `W`, `F` as
    /// little-endian u32, then `H*W*F` f32 values row-major (h, w, channel).
    pub fn write_fstk<W2: Write>(&self, mut out: W2) -> Result<()> {
        let (h, w, f) = self.data.dim();
        out.write_all(b"FSTK")?;
        out.write_u32::<LittleEndian>(h as u32)?;
        out.write_u32::<LittleEndian>(w as u32)?;
        out.write_u32::<LittleEndian>(f as u32)?;
        for &v in self.data.iter() {
            out.write_f32::<LittleEndian>(v as f32)?;
        }
        Ok(())
    }

    /// Reads the `FSTK` binary format. Channel names are not part of the file
    /// and come back as `c0..c{F-1}`.
    pub fn read_fstk<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != b"FSTK" {
            return Err(Error::Corpus("bad FSTK magic".into()));
        }
        let h = input.read_u32::<LittleEndian>()? as usize;
        let w = input.read_u32::<LittleEndian>()? as usize;
        let f = input.read_u32::<LittleEndian>()? as usize;
        let mut values = Vec::with_capacity(h * w * f);
        for _ in 0..h * w * f {
            values.push(input.read_f32::<LittleEndian>()? as f64);
        }
        let data = Array3::from_shape_vec((h, w, f), values)
            .map_err(|e| Error::Shape(e.to_string()))?;
        let names = (0..f).map(|c| format!("c{c}")).collect();
        FieldStack::new(data, names)
    }

    pub fn write_fstk_file(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_fstk(std::io::BufWriter::new(file))
    }

    pub fn read_fstk_file(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_fstk(std::io::BufReader::new(file))
    }
}

/// Assignment of field channels to `K` named body parts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartGrouping {
    pub part_count: usize,
    pub groups: Vec<Vec<usize>>,
    pub part_names: Vec<String>,
}

impl PartGrouping {
    pub fn new(groups: Vec<Vec<usize>>, part_names: Vec<String>) -> Result<Self> {
        let part_count = groups.len();
        if part_count < 2 {
            return Err(Error::InvalidGrouping("need at least 2 parts".into()));
        }
        if part_names.len() != part_count {
            return Err(Error::InvalidGrouping(format!(
                "{} names for {part_count} groups",
                part_names.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for group in &groups {
            if group.is_empty() {
                return Err(Error::InvalidGrouping("empty group".into()));
            }
            for &idx in group {
                if !seen.insert(idx) {
                    return Err(Error::InvalidGrouping(format!(
                        "channel {idx} appears in more than one group"
                    )));
                }
            }
        }
        let mut names = std::collections::HashSet::new();
        for name in &part_names {
            if !names.insert(name.as_str()) {
                return Err(Error::InvalidGrouping(format!("duplicate part name {name}")));
            }
        }
        Ok(Self {
            part_count,
            groups,
            part_names,
        })
    }
}

/// `K` grouped confidence maps, shape `(H, W, K)`.
#[derive(Debug, Clone)]
pub struct GroupedFields {
    pub data: Array3<f64>,
}

impl GroupedFields {
    pub fn part_count(&self) -> usize {
        self.data.dim().2
    }
}

/// Per-pixel part labels: `0` background, `1..=K` body parts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsingLabelMap {
    pub labels: Array2<u8>,
    pub part_count: usize,
}

impl ParsingLabelMap {
    pub fn new(labels: Array2<u8>, part_count: usize) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&l| l as usize > part_count) {
            return Err(Error::InvalidLabel {
                label: bad as usize,
                max: part_count,
            });
        }
        Ok(Self { labels, part_count })
    }

    /// Writes as a single-channel 8-bit PNG, pixel value = label.
    pub fn write_png(&self, path: &Path) -> Result<()> {
        let (h, w) = self.labels.dim();
        let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
            image::Luma([self.labels[(y as usize, x as usize)]])
        });
        img.save(path)?;
        Ok(())
    }

    pub fn read_png(path: &Path, part_count: usize) -> Result<Self> {
        let img = image::open(path)?.into_luma8();
        let (w, h) = img.dimensions();
        let labels = Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
            img.get_pixel(x as u32, y as u32).0[0]
        });
        Self::new(labels, part_count)
    }
}

/// Pixel-wise max over each group's channels: `E(h,w,k) = max_{c in group k} stack(h,w,c)`.
pub fn group_max(stack: &FieldStack, grouping: &PartGrouping) -> Result<GroupedFields> {
    let (h, w, f) = stack.data.dim();
    for group in &grouping.groups {
        if group.is_empty() {
            return Err(Error::InvalidGrouping("empty group".into()));
        }
        if let Some(&idx) = group.iter().find(|&&idx| idx >= f) {
            return Err(Error::InvalidGrouping(format!(
                "channel index {idx} out of range for {f} fields"
            )));
        }
    }
    let k = grouping.part_count;
    let mut data = Array3::zeros((h, w, k));
    for (gi, group) in grouping.groups.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                let mut best = 0.0f64;
                for &c in group {
                    best = best.max(stack.data[(y, x, c)]);
                }
                data[(y, x, gi)] = best;
            }
        }
    }
    Ok(GroupedFields { data })
}

/// Thresholded argmax over grouped fields: background where every channel is
/// below `lambda_t`, else `1 + argmax` (ties go to the lowest part index).
pub fn labels_from_fields(grouped: &GroupedFields, lambda_t: f64) -> ParsingLabelMap {
    let (h, w, k) = grouped.data.dim();
    let mut labels = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0usize;
            for c in 0..k {
                let v = grouped.data[(y, x, c)];
                if v > best {
                    best = v;
                    arg = c;
                }
            }
            labels[(y, x)] = if best < lambda_t { 0 } else { (arg + 1) as u8 };
        }
    }
    ParsingLabelMap {
        labels,
        part_count: k,
    }
}

/// Estimated head location of a person candidate, in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadPosition {
    pub x: f64,
    pub y: f64,
}

/// Picks the ReID target among several detected persons: the one whose head
/// is closest to the top center `(W/2, 0)` of the image extent. Ties go to
/// the lowest index.
pub fn select_target(heads: &[HeadPosition], extent: (f64, f64)) -> Result<usize> {
    if heads.is_empty() {
        return Err(Error::NoTarget);
    }
    let target = (extent.0 / 2.0, 0.0);
    let mut best = 0usize;
    let mut best_d2 = f64::INFINITY;
    for (i, head) in heads.iter().enumerate() {
        let dx = head.x - target.0;
        let dy = head.y - target.1;
        let d2 = dx * dx + dy * dy;
        if d2 < best_d2 {
            best_d2 = d2;
            best = i;
        }
    }
    Ok(best)
}

/// Centroid of the head-channel response above `lambda_t`, used as the head
/// coordinate fed to [`select_target`]. Returns `None` when no pixel clears
/// the threshold.
pub fn head_centroid(
    grouped: &GroupedFields,
    head_channel: usize,
    lambda_t: f64,
) -> Option<HeadPosition> {
    let (h, w, _) = grouped.data.dim();
    let mut sx = 0.0;
    let mut sy = 0.0;
    let mut n = 0usize;
    for y in 0..h {
        for x in 0..w {
            if grouped.data[(y, x, head_channel)] >= lambda_t {
                sx += x as f64;
                sy += y as f64;
                n += 1;
            }
        }
    }
    if n == 0 {
        None
    } else {
        Some(HeadPosition {
            x: sx / n as f64,
            y: sy / n as f64,
        })
    }
}

/// Per-pixel softmax over the `K` grouped channels, the fixed attention
/// weights used by the non-learnable attention ablation.
pub fn fixed_attention(grouped: &GroupedFields) -> Array3<f64> {
    let (h, w, k) = grouped.data.dim();
    let mut out = Array3::zeros((h, w, k));
    for y in 0..h {
        for x in 0..w {
            let mut maxv = f64::NEG_INFINITY;
            for c in 0..k {
                maxv = maxv.max(grouped.data[(y, x, c)]);
            }
            let mut sum = 0.0;
            for c in 0..k {
                let e = (grouped.data[(y, x, c)] - maxv).exp();
                out[(y, x, c)] = e;
                sum += e;
            }
            for c in 0..k {
                out[(y, x, c)] /= sum;
            }
        }
    }
    out
}

/// Canonical channel layout of synthetic field stacks: eleven atomic body
/// regions, fine enough to express every grouping preset.
pub const ATOM_NAMES: [&str; 11] = [
    "head",
    "upper torso",
    "lower torso",
    "upper right arm",
    "lower right arm",
    "upper left arm",
    "lower left arm",
    "right leg",
    "left leg",
    "right foot",
    "left foot",
];

/// Named grouping strategies for K in {2, 3, 4, 5, 6, 8, 11}, as index sets
/// over the canonical eleven-region channel layout ([`ATOM_NAMES`]).
pub fn grouping_preset(k: usize) -> Result<PartGrouping> {
    let (groups, names): (Vec<Vec<usize>>, Vec<&str>) = match k {
        2 => (
            vec![vec![0, 1, 2, 3, 4, 5, 6], vec![7, 8, 9, 10]],
            vec!["upper body", "lower body"],
        ),
        3 => (
            vec![vec![0], vec![1, 2, 3, 4, 5, 6], vec![7, 8, 9, 10]],
            vec!["head", "middle body", "lower body"],
        ),
        4 => (
            vec![vec![0], vec![1, 2], vec![3, 4, 5, 6], vec![7, 8, 9, 10]],
            vec!["head", "torso", "arms", "lower body"],
        ),
        5 => (
            vec![vec![0], vec![1, 2], vec![3, 4, 5, 6], vec![7, 8], vec![9, 10]],
            vec!["head", "torso", "arms", "legs", "feet"],
        ),
        6 => (
            vec![
                vec![0],
                vec![1, 2],
                vec![3, 4],
                vec![5, 6],
                vec![7, 8],
                vec![9, 10],
            ],
            vec!["head", "torso", "right arm", "left arm", "legs", "feet"],
        ),
        8 => (
            vec![
                vec![0],
                vec![1, 2],
                vec![3, 4],
                vec![5, 6],
                vec![7],
                vec![8],
                vec![9],
                vec![10],
            ],
            vec![
                "head",
                "torso",
                "right arm",
                "left arm",
                "right leg",
                "left leg",
                "right foot",
                "left foot",
            ],
        ),
        11 => (
            (0..11).map(|i| vec![i]).collect(),
            ATOM_NAMES.to_vec(),
        ),
        other => return Err(Error::UnsupportedPreset(other)),
    };
    PartGrouping::new(groups, names.into_iter().map(String::from).collect())
}

/// Bilinear resize of an `(H, W, C)` array to `(out_h, out_w, C)`, used to
/// bring field stacks to the label resolution when they differ.
pub fn resize_bilinear(src: &Array3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (h, w, c) = src.dim();
    let mut out = Array3::zeros((out_h, out_w, c));
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for oy in 0..out_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            for ch in 0..c {
                let top = src[(y0, x0, ch)] * (1.0 - wx) + src[(y0, x1, ch)] * wx;
                let bot = src[(y1, x0, ch)] * (1.0 - wx) + src[(y1, x1, ch)] * wx;
                out[(oy, ox, ch)] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    out
}

/// Nearest-neighbor majority downsample of a label map to `(out_h, out_w)`;
/// each output cell takes the most frequent label of its source block, ties
/// going to the lowest label.
pub fn downsample_labels_majority(
    labels: &ParsingLabelMap,
    out_h: usize,
    out_w: usize,
) -> ParsingLabelMap {
    let (h, w) = labels.labels.dim();
    let mut out = Array2::zeros((out_h, out_w));
    for oy in 0..out_h {
        let y0 = oy * h / out_h;
        let y1 = ((oy + 1) * h).div_ceil(out_h).min(h).max(y0 + 1);
        for ox in 0..out_w {
            let x0 = ox * w / out_w;
            let x1 = ((ox + 1) * w).div_ceil(out_w).min(w).max(x0 + 1);
            let mut counts = vec![0usize; labels.part_count + 1];
            for y in y0..y1 {
                for x in x0..x1 {
                    counts[labels.labels[(y, x)] as usize] += 1;
                }
            }
            let mut best = 0usize;
            for (l, &c) in counts.iter().enumerate() {
                if c > counts[best] {
                    best = l;
                }
            }
            out[(oy, ox)] = best as u8;
        }
    }
    ParsingLabelMap {
        labels: out,
        part_count: labels.part_count,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_stack(rng: &mut ChaCha8Rng, h: usize, w: usize, f: usize) -> FieldStack {
        let data = Array3::from_shape_fn((h, w, f), |_| rng.gen::<f64>());
        let names = (0..f).map(|c| format!("c{c}")).collect();
        FieldStack::new(data, names).unwrap()
    }

    #[test]
    fn group_max_identity_groups() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let stack = random_stack(&mut rng, 3, 3, 4);
        let grouping = PartGrouping::new(
            vec![vec![2], vec![0]],
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        let e = group_max(&stack, &grouping).unwrap();
        for y in 0..3 {
            for x in 0..3 {
                assert_eq!(e.data[(y, x, 0)], stack.data[(y, x, 2)]);
                assert_eq!(e.data[(y, x, 1)], stack.data[(y, x, 0)]);
            }
        }
    }

    #[test]
    fn group_max_pairwise() {
        let mut data = Array3::zeros((1, 1, 2));
        data[(0, 0, 0)] = 0.2;
        data[(0, 0, 1)] = 0.7;
        let stack = FieldStack::new(data, vec!["a".into(), "b".into()]).unwrap();
        let grouping =
            PartGrouping::new(vec![vec![0, 1], vec![]], vec!["x".into(), "y".into()]);
        // empty group rejected at construction
        assert!(grouping.is_err());
        let grouping = PartGrouping::new(
            vec![vec![0], vec![1]],
            vec!["x".into(), "y".into()],
        )
        .unwrap();
        let both = PartGrouping {
            part_count: 2,
            groups: vec![vec![0, 1], vec![1]],
            part_names: vec!["x".into(), "y".into()],
        };
        // disjointness is a constructor rule; group_max itself only checks ranges
        let e = group_max(&stack, &both).unwrap();
        assert_eq!(e.data[(0, 0, 0)], 0.7);
        let e = group_max(&stack, &grouping).unwrap();
        assert_eq!(e.data[(0, 0, 1)], 0.7);
    }

    #[test]
    fn group_max_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let stack = random_stack(&mut rng, 4, 4, 6);
        let grouping = PartGrouping::new(
            vec![vec![0, 3], vec![1, 4], vec![2, 5]],
            vec!["a".into(), "b".into(), "c".into()],
        )
        .unwrap();
        let e = group_max(&stack, &grouping).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                for (gi, group) in grouping.groups.iter().enumerate() {
                    let mut expect = f64::NEG_INFINITY;
                    for &c in group {
                        if stack.data[(y, x, c)] > expect {
                            expect = stack.data[(y, x, c)];
                        }
                    }
                    assert_eq!(e.data[(y, x, gi)], expect);
                }
            }
        }
    }

    #[test]
    fn group_max_rejects_bad_index() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let stack = random_stack(&mut rng, 2, 2, 3);
        let grouping = PartGrouping {
            part_count: 2,
            groups: vec![vec![0], vec![5]],
            part_names: vec!["a".into(), "b".into()],
        };
        assert!(matches!(
            group_max(&stack, &grouping),
            Err(Error::InvalidGrouping(_))
        ));
    }

    #[test]
    fn labels_threshold_and_argmax() {
        let mut data = Array3::zeros((1, 2, 2));
        data[(0, 0, 0)] = 0.4;
        data[(0, 0, 1)] = 0.3;
        data[(0, 1, 0)] = 0.9;
        data[(0, 1, 1)] = 0.2;
        let y = labels_from_fields(&GroupedFields { data }, 0.5);
        assert_eq!(y.labels[(0, 0)], 0);
        assert_eq!(y.labels[(0, 1)], 1);
    }

    #[test]
    fn labels_exactly_at_threshold_are_foreground() {
        let mut data = Array3::zeros((1, 1, 2));
        data[(0, 0, 1)] = 0.5;
        let y = labels_from_fields(&GroupedFields { data }, 0.5);
        assert_eq!(y.labels[(0, 0)], 2);
    }

    #[test]
    fn labels_match_per_pixel_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = Array3::from_shape_fn((8, 8, 5), |_| rng.gen::<f64>());
        let grouped = GroupedFields { data: data.clone() };
        let y = labels_from_fields(&grouped, 0.5);
        for r in 0..8 {
            for c in 0..8 {
                let mut best = f64::NEG_INFINITY;
                let mut arg = 0;
                for k in 0..5 {
                    if data[(r, c, k)] > best {
                        best = data[(r, c, k)];
                        arg = k;
                    }
                }
                let expect = if best < 0.5 { 0 } else { arg as u8 + 1 };
                assert_eq!(y.labels[(r, c)], expect);
            }
        }
    }

    #[test]
    fn labels_monotone_in_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data = Array3::from_shape_fn((6, 6, 3), |_| rng.gen::<f64>());
        let grouped = GroupedFields { data };
        let lo = labels_from_fields(&grouped, 0.3);
        let hi = labels_from_fields(&grouped, 0.7);
        for (a, b) in lo.labels.iter().zip(hi.labels.iter()) {
            // raising the threshold can only turn foreground into background
            if *a == 0 {
                assert_eq!(*b, 0);
            }
        }
    }

    #[test]
    fn select_target_prefers_top_center() {
        let heads = vec![
            HeadPosition { x: 16.0, y: 6.4 },
            HeadPosition { x: 3.2, y: 32.0 },
        ];
        assert_eq!(select_target(&heads, (32.0, 64.0)).unwrap(), 0);
        assert_eq!(
            select_target(&heads[..1], (32.0, 64.0)).unwrap(),
            0,
            "single candidate"
        );
        assert!(matches!(select_target(&[], (32.0, 64.0)), Err(Error::NoTarget)));
    }

    #[test]
    fn select_target_tie_breaks_to_lowest_index() {
        let heads = vec![
            HeadPosition { x: 10.0, y: 5.0 },
            HeadPosition { x: 22.0, y: 5.0 },
        ];
        // both are equidistant from (16, 0)
        assert_eq!(select_target(&heads, (32.0, 64.0)).unwrap(), 0);
    }

    #[test]
    fn select_target_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let heads: Vec<HeadPosition> = (0..5)
            .map(|_| HeadPosition {
                x: rng.gen::<f64>() * 32.0,
                y: rng.gen::<f64>() * 64.0,
            })
            .collect();
        let chosen = select_target(&heads, (32.0, 64.0)).unwrap();
        let mut rev: Vec<HeadPosition> = heads.clone();
        rev.reverse();
        let chosen_rev = select_target(&rev, (32.0, 64.0)).unwrap();
        assert_eq!(rev[chosen_rev], heads[chosen]);
    }

    #[test]
    fn fixed_attention_uniform_on_equal_channels() {
        let data = Array3::from_elem((2, 2, 4), 0.3);
        let att = fixed_attention(&GroupedFields { data });
        for v in att.iter() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn fixed_attention_shift_invariant_and_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = Array3::from_shape_fn((4, 4, 3), |_| rng.gen::<f64>());
        let att = fixed_attention(&GroupedFields { data: data.clone() });
        let shifted = fixed_attention(&GroupedFields {
            data: data.mapv(|v| v + 0.17),
        });
        for (a, b) in att.iter().zip(shifted.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        // reference exp/normalize loop
        for y in 0..4 {
            for x in 0..4 {
                let mut sum = 0.0;
                for c in 0..3 {
                    sum += data[(y, x, c)].exp();
                }
                let mut row = 0.0;
                for c in 0..3 {
                    let expect = data[(y, x, c)].exp() / sum;
                    assert!((att[(y, x, c)] - expect).abs() < 1e-12);
                    row += att[(y, x, c)];
                }
                assert!((row - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn presets_match_published_groupings() {
        let g8 = grouping_preset(8).unwrap();
        assert_eq!(
            g8.part_names,
            vec![
                "head",
                "torso",
                "right arm",
                "left arm",
                "right leg",
                "left leg",
                "right foot",
                "left foot"
            ]
        );
        let g5 = grouping_preset(5).unwrap();
        assert_eq!(g5.part_names, vec!["head", "torso", "arms", "legs", "feet"]);
        assert!(matches!(grouping_preset(7), Err(Error::UnsupportedPreset(7))));
        for k in [2usize, 3, 4, 5, 6, 8, 11] {
            let g = grouping_preset(k).unwrap();
            assert_eq!(g.part_count, k);
            let mut all: Vec<usize> = g.groups.iter().flatten().copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..11).collect::<Vec<_>>(), "K={k} covers all channels");
        }
    }

    #[test]
    fn fstk_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let stack = random_stack(&mut rng, 5, 3, 2);
        let mut buf = Vec::new();
        stack.write_fstk(&mut buf).unwrap();
        let back = FieldStack::read_fstk(&buf[..]).unwrap();
        assert_eq!(back.data.dim(), stack.data.dim());
        for (a, b) in stack.data.iter().zip(back.data.iter()) {
            assert!((a - b).abs() < 1e-7, "f32 storage precision");
        }
    }

    #[test]
    fn group_max_idempotent_under_singleton_refinement() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let stack = random_stack(&mut rng, 4, 4, 6);
        let grouping = grouping_preset_from_pairs();
        let direct = group_max(&stack, &grouping).unwrap();
        // refine into singletons, then re-max over the singleton outputs
        let singles = PartGrouping::new(
            (0..6).map(|i| vec![i]).collect(),
            (0..6).map(|i| format!("s{i}")).collect(),
        )
        .unwrap();
        let refined = group_max(&stack, &singles).unwrap();
        let refined_stack = FieldStack::new(
            refined.data,
            (0..6).map(|i| format!("s{i}")).collect(),
        )
        .unwrap();
        let again = group_max(&refined_stack, &grouping).unwrap();
        for (a, b) in direct.data.iter().zip(again.data.iter()) {
            assert_eq!(a, b);
        }
    }

    fn grouping_preset_from_pairs() -> PartGrouping {
        PartGrouping::new(
            vec![vec![0, 1], vec![2, 3], vec![4, 5]],
            vec!["a".into(), "b".into(), "c".into()],
        )
        .unwrap()
    }

    #[test]
    fn majority_downsample_prefers_lowest_on_ties() {
        let labels = Array2::from_shape_vec((2, 2), vec![1u8, 2, 2, 1]).unwrap();
        let map = ParsingLabelMap::new(labels, 2).unwrap();
        let down = downsample_labels_majority(&map, 1, 1);
        assert_eq!(down.labels[(0, 0)], 1);
    }
}
